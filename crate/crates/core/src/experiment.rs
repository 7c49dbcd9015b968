//! Declarative ARL experiments: TOML in, CSV rows and a JSON manifest out.
//!
//! ```toml
//! name = "table1_p50"
//! kind = "arl"                 # arl | learning_time
//! seed = 1
//! rng = "chacha8"
//! structure = "identity"       # identity | ar1
//! ar = [0.5]                   # AR coefficients when structure = "ar1"
//! p = [50]
//! alpha = [0.01, 0.005]
//! cf_order = [1, 0]
//! n_reps = 10000
//! estimation = "known"         # known | classical | robust
//! monitoring = "fixed"         # fixed | self_starting
//! phase1_size = 200
//!
//! [shift]
//! fraction = 0.2               # or coordinates = [0, 3, 7]
//! delta = [1.0]
//!
//! [contamination]
//! rate = 0.2                   # Phase I outliers share the Phase II shift
//!
//! [learning]
//! tau = [20, 50, 100, 300, 1000]
//! eta = 5.0
//! policy = "skip"              # skip | restart
//! ```

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::chart::{CfOrder, ChartConfig};
use crate::error::{Error, Result};
use crate::parallel::{self, RNG_ALGORITHM};
use crate::robust::RobustConfig;
use crate::simulation::{
    self, ArlSettings, ContaminationModel, Estimation, LearningSettings, Monitoring, PreTauPolicy, Scenario,
    ShiftModel, Structure, DEFAULT_MAX_LEN_FACTOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Arl,
    LearningTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    #[default]
    Identity,
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationKind {
    #[default]
    Known,
    Classical,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitoringKind {
    #[default]
    Fixed,
    SelfStarting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub fraction: Option<f64>,
    pub coordinates: Option<Vec<usize>>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContaminationConfig {
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningConfig {
    pub tau: Vec<usize>,
    pub eta: f64,
    #[serde(default)]
    pub policy: PreTauPolicy,
    #[serde(default = "default_max_restarts")]
    pub max_restarts: usize,
}

fn default_max_restarts() -> usize {
    10_000
}
fn default_rng() -> String {
    RNG_ALGORITHM.to_owned()
}
fn default_cf_order() -> Vec<CfOrder> {
    vec![CfOrder::First]
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_phase1() -> usize {
    200
}
fn default_max_len_factor() -> f64 {
    DEFAULT_MAX_LEN_FACTOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default = "default_rng")]
    pub rng: String,
    #[serde(default)]
    pub structure: StructureKind,
    #[serde(default)]
    pub ar: Vec<f64>,
    pub p: Vec<usize>,
    pub alpha: Vec<f64>,
    #[serde(default = "default_cf_order")]
    pub cf_order: Vec<CfOrder>,
    pub n_reps: usize,
    #[serde(default)]
    pub estimation: EstimationKind,
    #[serde(default)]
    pub monitoring: MonitoringKind,
    #[serde(default = "default_one")]
    pub refresh_every: usize,
    #[serde(default = "default_phase1")]
    pub phase1_size: usize,
    #[serde(default = "default_max_len_factor")]
    pub max_len_factor: f64,
    #[serde(default = "default_true")]
    pub apply_correction: bool,
    pub shift: Option<ShiftConfig>,
    pub contamination: Option<ContaminationConfig>,
    pub learning: Option<LearningConfig>,
    pub output: Option<PathBuf>,
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.to_owned(), message: message.into() }
}

/// Field name quoted in a deserializer message, if any.
fn quoted_field(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_owned())
}

/// Dotted key of the `key = value` line containing byte `offset`, qualified
/// by the nearest preceding table header.
fn key_at(src: &str, offset: usize) -> Option<String> {
    let line_start = src[..offset.min(src.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = src[line_start..].lines().next()?;
    let key = line.split_once('=')?.0.trim();
    if key.is_empty() || key.starts_with('[') {
        return None;
    }
    let table = src[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_owned());
    Some(match table {
        Some(t) => format!("{t}.{key}"),
        None => key.to_owned(),
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_owned();
            let field = quoted_field(&msg)
                .or_else(|| e.span().and_then(|sp| key_at(s, sp.start)))
                .unwrap_or_else(|| "<document>".into());
            config_err(&field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rng != RNG_ALGORITHM {
            return Err(config_err("rng", format!("only \"{RNG_ALGORITHM}\" is supported, got \"{}\"", self.rng)));
        }
        if self.p.is_empty() || self.p.contains(&0) {
            return Err(config_err("p", "need at least one dimension, all >= 1"));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a > 0.0 && *a < 0.5)) {
            return Err(config_err("alpha", "need at least one value, all in (0, 0.5)"));
        }
        if self.cf_order.is_empty() {
            return Err(config_err("cf_order", "need at least one order"));
        }
        if self.n_reps == 0 {
            return Err(config_err("n_reps", "must be >= 1"));
        }
        if !(self.max_len_factor >= 1.0) {
            return Err(config_err("max_len_factor", "must be >= 1"));
        }
        match self.structure {
            StructureKind::Ar1 if self.ar.is_empty() => return Err(config_err("ar", "ar1 structure needs coefficients")),
            StructureKind::Ar1 if self.ar.iter().any(|a| !(0.0..1.0).contains(a)) => {
                return Err(config_err("ar", "coefficients must be in [0, 1)"));
            }
            StructureKind::Identity if !self.ar.is_empty() => {
                return Err(config_err("ar", "only valid with structure = \"ar1\""));
            }
            _ => {}
        }
        let needs_phase1 = self.estimation != EstimationKind::Known || self.monitoring == MonitoringKind::SelfStarting;
        if needs_phase1 && self.phase1_size < 2 {
            return Err(config_err("phase1_size", "must be >= 2 when parameters are estimated"));
        }
        if let Some(s) = &self.shift {
            if s.fraction.is_some() == s.coordinates.is_some() {
                return Err(config_err("shift", "give exactly one of `fraction` or `coordinates`"));
            }
            if s.delta.is_empty() {
                return Err(config_err("delta", "need at least one shift magnitude"));
            }
        }
        if let Some(c) = &self.contamination {
            if !(0.0..0.5).contains(&c.rate) {
                return Err(config_err("rate", "contamination rate must be in [0, 0.5)"));
            }
            if self.shift.is_none() {
                return Err(config_err("contamination", "contamination reuses the [shift] geometry, which is missing"));
            }
        }
        match (self.kind, &self.learning) {
            (ExperimentKind::LearningTime, None) => return Err(config_err("learning", "required for kind = \"learning_time\"")),
            (ExperimentKind::LearningTime, Some(l)) => {
                if l.tau.is_empty() {
                    return Err(config_err("tau", "need at least one value"));
                }
                if !(l.eta > 0.0) {
                    return Err(config_err("eta", "must be positive"));
                }
                if self.estimation == EstimationKind::Known {
                    return Err(config_err("estimation", "learning-time runs estimate parameters"));
                }
            }
            (ExperimentKind::Arl, Some(_)) => return Err(config_err("learning", "only valid for kind = \"learning_time\"")),
            _ => {}
        }
        Ok(())
    }

    fn scenarios(&self) -> Result<Vec<(Option<f64>, Scenario)>> {
        let mut out = Vec::new();
        for &p in &self.p {
            match self.structure {
                StructureKind::Identity => out.push((None, Scenario::identity(p))),
                StructureKind::Ar1 => {
                    for &a in &self.ar {
                        out.push((Some(a), Scenario::new(format!("ar1({a})"), p, Structure::Ar1(a))?));
                    }
                }
            }
        }
        Ok(out)
    }

    fn estimation(&self) -> Estimation {
        match self.estimation {
            EstimationKind::Known => Estimation::Known,
            EstimationKind::Classical => Estimation::Classical,
            EstimationKind::Robust => Estimation::Robust(RobustConfig::with_seed(self.seed)),
        }
    }

    fn shift_model(&self, delta: f64) -> Option<ShiftModel> {
        let s = self.shift.as_ref()?;
        Some(match (&s.fraction, &s.coordinates) {
            (Some(f), _) => ShiftModel::Fraction { fraction: *f, delta },
            (None, Some(c)) => ShiftModel::Coordinates { coordinates: c.clone(), delta },
            (None, None) => unreachable!("validated"),
        })
    }
}

/// One CSV row per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub structure: StructureKind,
    pub a: Option<f64>,
    pub p: usize,
    pub alpha: f64,
    pub cf_order: u8,
    pub delta: Option<f64>,
    pub tau: Option<usize>,
    pub arl_hat: f64,
    pub std_err: f64,
    pub n_reps: usize,
    pub censored: usize,
    pub skipped: usize,
    pub pre_tau_signals: Option<usize>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub crate_version: String,
    pub rng_algorithm: String,
    pub seed: u64,
    pub parallel: bool,
    pub threads: usize,
    pub started_unix: u64,
    pub wall_time: f64,
    pub n_rows: usize,
    pub output_csv: Option<PathBuf>,
    pub config: ExperimentConfig,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Runs every grid point in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<GridRow>, Manifest)> {
    cfg.validate()?;
    let started_unix = unix_now();
    let t0 = Instant::now();
    let deltas: Vec<Option<f64>> = match &cfg.shift {
        Some(s) => s.delta.iter().map(|d| Some(*d)).collect(),
        None => vec![None],
    };
    let mut rows = Vec::new();
    for (a, scenario) in cfg.scenarios()? {
        for &alpha in &cfg.alpha {
            for &order in &cfg.cf_order {
                let chart = ChartConfig::new(alpha, order)?.with_correction(cfg.apply_correction);
                let max_len = (cfg.max_len_factor / alpha).ceil() as usize;
                let base = |delta, tau, pre, wall, r: (f64, f64, usize, usize, usize)| GridRow {
                    name: cfg.name.clone(),
                    structure: cfg.structure,
                    a,
                    p: scenario.p,
                    alpha,
                    cf_order: order.into(),
                    delta,
                    tau,
                    arl_hat: r.0,
                    std_err: r.1,
                    n_reps: r.2,
                    censored: r.3,
                    skipped: r.4,
                    pre_tau_signals: pre,
                    wall_time: wall,
                };
                match cfg.kind {
                    ExperimentKind::Arl => {
                        for &delta in &deltas {
                            let t = Instant::now();
                            let shift = delta.and_then(|d| cfg.shift_model(d));
                            let contamination = match (&cfg.contamination, &shift) {
                                (Some(c), Some(s)) => Some(ContaminationModel::new(c.rate, s.clone())?),
                                _ => None,
                            };
                            let settings = ArlSettings {
                                chart,
                                phase1_size: cfg.phase1_size,
                                estimation: cfg.estimation(),
                                monitoring: match cfg.monitoring {
                                    MonitoringKind::Fixed => Monitoring::Fixed,
                                    MonitoringKind::SelfStarting => Monitoring::SelfStarting { refresh_every: cfg.refresh_every },
                                },
                                n_reps: cfg.n_reps,
                                max_len: Some(max_len),
                                seed: cfg.seed,
                            };
                            let r = simulation::run_arl(&scenario, shift.as_ref(), contamination.as_ref(), &settings)?;
                            let wall = t.elapsed().as_secs_f64();
                            rows.push(base(delta, None, None, wall, (r.arl_hat, r.std_err, r.n_reps, r.censored, r.skipped)));
                        }
                    }
                    ExperimentKind::LearningTime => {
                        let l = cfg.learning.as_ref().expect("validated");
                        let settings = LearningSettings {
                            chart,
                            phase1_size: cfg.phase1_size,
                            estimation: cfg.estimation(),
                            refresh_every: cfg.refresh_every,
                            eta: l.eta,
                            n_reps: cfg.n_reps,
                            max_len: Some(max_len),
                            policy: l.policy,
                            max_restarts: l.max_restarts,
                            seed: cfg.seed,
                        };
                        for &tau in &l.tau {
                            let t = Instant::now();
                            let pt = simulation::learning_time_experiment(&scenario, &[tau], &settings)?.remove(0);
                            let wall = t.elapsed().as_secs_f64();
                            rows.push(base(
                                None,
                                Some(tau),
                                Some(pt.pre_tau_signals),
                                wall,
                                (pt.arl1, pt.std_err, pt.n_reps, pt.censored, pt.skipped),
                            ));
                        }
                    }
                }
            }
        }
    }
    let manifest = Manifest {
        name: cfg.name.clone(),
        crate_version: env!("CARGO_PKG_VERSION").to_owned(),
        rng_algorithm: RNG_ALGORITHM.to_owned(),
        seed: cfg.seed,
        parallel: parallel::is_parallel(),
        threads: threads(),
        started_unix,
        wall_time: t0.elapsed().as_secs_f64(),
        n_rows: rows.len(),
        output_csv: cfg.output.clone(),
        config: cfg.clone(),
    };
    Ok((rows, manifest))
}

pub fn write_rows_csv<W: std::io::Write>(writer: W, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
