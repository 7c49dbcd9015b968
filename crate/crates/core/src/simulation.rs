//! Scenario generators and the Monte Carlo run-length engine.
//!
//! Every replication draws from its own ChaCha8 substream keyed by
//! `(seed, replication index)`, and replication results are reduced in index
//! order, so results do not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chart::{self, CfOrder, ChartConfig, ProcessParameters, ShiftSpec};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, substream};
use crate::robust::{self, RobustConfig};
use crate::selfstart::{PhaseOne, SelfStartState};
use crate::stats::{self, DataMatrix, TraceEstimates};
use crate::sum::NeumaierSum;

/// Largest tolerated fraction of replications lost to estimation failures.
pub const MAX_SKIP_RATE: f64 = 0.01;

/// Default censoring cap as a multiple of the nominal in-control ARL.
pub const DEFAULT_MAX_LEN_FACTOR: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Identity,
    Ar1(f64),
}

/// In-control distribution `N(mu, Σ)` with unit variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub p: usize,
    pub structure: Structure,
    pub mu: DVector<f64>,
}

impl Scenario {
    pub fn new(name: impl Into<String>, p: usize, structure: Structure) -> Result<Self> {
        if p == 0 {
            return Err(Error::Dimension("scenario needs p >= 1".into()));
        }
        if let Structure::Ar1(a) = structure {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Domain(format!("AR coefficient must be in [0, 1), got {a}")));
            }
        }
        Ok(Self { name: name.into(), p, structure, mu: DVector::zeros(p) })
    }

    /// Scenario 1: independent variables.
    pub fn identity(p: usize) -> Self {
        Self::new("identity", p, Structure::Identity).expect("p >= 1")
    }

    /// Scenario 2 for `a = 0.5`: `σ_ij = a^{|i−j|}`.
    pub fn ar1(p: usize, a: f64) -> Result<Self> {
        Self::new(format!("ar1({a})"), p, Structure::Ar1(a))
    }

    pub fn with_mean(mut self, mu: DVector<f64>) -> Result<Self> {
        if mu.len() != self.p {
            return Err(Error::Dimension(format!("mean has {} entries, expected {}", mu.len(), self.p)));
        }
        self.mu = mu;
        Ok(self)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self.structure {
            Structure::Identity => DMatrix::identity(self.p, self.p),
            Structure::Ar1(a) => stats::ar1_correlation(self.p, a),
        }
    }

    /// True parameters, as used by known-parameter charts.
    pub fn true_params(&self) -> Result<ProcessParameters> {
        ProcessParameters::known(self.mu.clone(), &self.covariance())
    }

    /// Draws one observation into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.p);
        match self.structure {
            Structure::Identity => {
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            Structure::Ar1(a) => {
                let s = (1.0 - a * a).sqrt();
                let mut prev: f64 = rng.sample(StandardNormal);
                out[0] = prev;
                for v in out.iter_mut().skip(1) {
                    let e: f64 = rng.sample(StandardNormal);
                    prev = a * prev + s * e;
                    *v = prev;
                }
            }
        }
        for (v, m) in out.iter_mut().zip(self.mu.iter()) {
            *v += m;
        }
    }

    pub fn sample_observation<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut x = DVector::zeros(self.p);
        self.sample_into(rng, x.as_mut_slice());
        x
    }

    /// `m` independent observations, optionally shifted.
    pub fn sample_matrix<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.p];
        let mut out = DMatrix::zeros(m, self.p);
        for i in 0..m {
            self.sample_into(rng, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        out
    }
}

/// Mean shift applied to a set of coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftModel {
    /// The first `round(fraction · p)` variables.
    Fraction { fraction: f64, delta: f64 },
    /// Explicit 0-based coordinates.
    Coordinates { coordinates: Vec<usize>, delta: f64 },
}

impl ShiftModel {
    pub fn fraction(fraction: f64, delta: f64) -> Self {
        Self::Fraction { fraction, delta }
    }

    pub fn delta(&self) -> f64 {
        match self {
            Self::Fraction { delta, .. } | Self::Coordinates { delta, .. } => *delta,
        }
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        match self {
            Self::Fraction { fraction, .. } => Self::Fraction { fraction: *fraction, delta },
            Self::Coordinates { coordinates, .. } => Self::Coordinates { coordinates: coordinates.clone(), delta },
        }
    }

    pub fn vector(&self, p: usize) -> Result<DVector<f64>> {
        if !self.delta().is_finite() {
            return Err(Error::Domain("shift magnitude must be finite".into()));
        }
        let mut v = DVector::zeros(p);
        match self {
            Self::Fraction { fraction, delta } => {
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::Domain(format!("shift fraction must be in [0, 1], got {fraction}")));
                }
                let k = (fraction * p as f64).round() as usize;
                v.rows_mut(0, k).fill(*delta);
            }
            Self::Coordinates { coordinates, delta } => {
                for &c in coordinates {
                    if c >= p {
                        return Err(Error::Dimension(format!("shift coordinate {c} outside 0..{p}")));
                    }
                    v[c] = *delta;
                }
            }
        }
        Ok(v)
    }
}

/// `⌊m·rate⌋` Phase I rows drawn from the shifted distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationModel {
    pub rate: f64,
    pub shift: ShiftModel,
}

impl ContaminationModel {
    pub fn new(rate: f64, shift: ShiftModel) -> Result<Self> {
        if !(0.0..0.5).contains(&rate) {
            return Err(Error::Domain(format!("contamination rate must be in [0, 0.5), got {rate}")));
        }
        Ok(Self { rate, shift })
    }

    pub fn n_outliers(&self, m: usize) -> usize {
        (m as f64 * self.rate).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimation {
    Known,
    Classical,
    Robust(RobustConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitoring {
    /// Phase I estimates stay fixed during Phase II.
    Fixed,
    /// In-control Phase II points are absorbed; traces refreshed every `refresh_every`.
    SelfStarting { refresh_every: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArlSettings {
    pub chart: ChartConfig,
    pub phase1_size: usize,
    pub estimation: Estimation,
    pub monitoring: Monitoring,
    pub n_reps: usize,
    /// Censoring cap; `None` means `50/α`.
    pub max_len: Option<usize>,
    pub seed: u64,
}

impl ArlSettings {
    pub fn known(alpha: f64, cf_order: CfOrder, n_reps: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            chart: ChartConfig::new(alpha, cf_order)?,
            phase1_size: 0,
            estimation: Estimation::Known,
            monitoring: Monitoring::Fixed,
            n_reps,
            max_len: None,
            seed,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
            .unwrap_or_else(|| (DEFAULT_MAX_LEN_FACTOR / self.chart.alpha).ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArlResult {
    pub arl_hat: f64,
    /// Sample standard deviation of run lengths over `√n_reps`.
    pub std_err: f64,
    pub n_reps: usize,
    pub censored: usize,
    pub skipped: usize,
    pub seed: u64,
    pub scenario: String,
    pub p: usize,
    pub alpha: f64,
    pub cf_order: CfOrder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Rep {
    Done { len: usize, censored: bool },
    Skipped,
}

/// Mean and standard error of the run lengths, reduced in index order.
fn summarize(lengths: &[f64]) -> (f64, f64) {
    let n = lengths.len() as f64;
    let mean = lengths.iter().copied().collect::<NeumaierSum>().value() / n;
    if lengths.len() < 2 {
        return (mean, f64::NAN);
    }
    let ss = lengths.iter().map(|l| (l - mean) * (l - mean)).collect::<NeumaierSum>().value();
    (mean, (ss / (n - 1.0) / n).sqrt())
}

fn collect(reps: Vec<Rep>, meta: ArlMeta) -> Result<ArlResult> {
    let total = reps.len();
    let mut lengths = Vec::with_capacity(total);
    let mut censored = 0;
    for r in &reps {
        if let Rep::Done { len, censored: c } = r {
            lengths.push(*len as f64);
            censored += usize::from(*c);
        }
    }
    let skipped = total - lengths.len();
    if skipped as f64 > MAX_SKIP_RATE * total as f64 || lengths.is_empty() {
        return Err(Error::SkipRateExceeded { failed: skipped, total });
    }
    let (arl_hat, std_err) = summarize(&lengths);
    Ok(ArlResult {
        arl_hat,
        std_err,
        n_reps: lengths.len(),
        censored,
        skipped,
        seed: meta.seed,
        scenario: meta.scenario,
        p: meta.p,
        alpha: meta.alpha,
        cf_order: meta.cf_order,
    })
}

struct ArlMeta {
    seed: u64,
    scenario: String,
    p: usize,
    alpha: f64,
    cf_order: CfOrder,
}

/// Fixed-parameter chart with the limit precomputed.
struct FixedChart<'a> {
    params: &'a ProcessParameters,
    scale: f64,
    shift: f64,
    z_alpha: f64,
    p: f64,
}

impl<'a> FixedChart<'a> {
    fn new(params: &'a ProcessParameters, config: &ChartConfig) -> Result<Self> {
        let ucl = config.ucl(&params.traces)?;
        let c = params.correction(config.apply_correction);
        Ok(Self {
            params,
            scale: c * (2.0 * params.traces.tr2_hat).sqrt(),
            shift: ucl - config.z_alpha(),
            z_alpha: config.z_alpha(),
            p: params.p() as f64,
        })
    }

    #[inline]
    fn signals(&self, x: &[f64]) -> bool {
        let m2 = chart::modified_distance_unchecked(x, self.params.mu.as_slice(), self.params.d_diag.as_slice());
        let u = (m2 - self.p) / self.scale;
        u - self.shift > self.z_alpha
    }
}

fn phase1_sample<R: Rng + ?Sized>(
    scenario: &Scenario,
    m: usize,
    contamination: Option<&ContaminationModel>,
    rng: &mut R,
) -> Result<DataMatrix> {
    let mut data = scenario.sample_matrix(rng, m);
    if let Some(c) = contamination {
        let shift = c.shift.vector(scenario.p)?;
        for i in 0..c.n_outliers(m) {
            for j in 0..scenario.p {
                data[(i, j)] += shift[j];
            }
        }
    }
    DataMatrix::new(data)
}

fn estimate<R: Rng + ?Sized>(
    scenario: &Scenario,
    data: &DataMatrix,
    estimation: &Estimation,
    rng: &mut R,
) -> Result<ProcessParameters> {
    match estimation {
        Estimation::Known => scenario.true_params(),
        Estimation::Classical => {
            let cov = stats::sample_covariance(data)?;
            let r = stats::correlation(&cov)?;
            let traces = TraceEstimates::estimate(&r, data.nrows())?;
            ProcessParameters::new(stats::sample_mean(data), cov.d_s, traces, chart::ParamSource::Classical)
        }
        Estimation::Robust(cfg) => {
            let cfg = RobustConfig { seed: rng.random(), ..cfg.clone() };
            robust::rmdp_estimate(data, &cfg)?.params()
        }
    }
}

/// Monte Carlo ARL: each replication estimates parameters from a fresh
/// Phase I sample (unless known) and monitors shifted Phase II draws until
/// a signal or `max_len`.
pub fn run_arl(
    scenario: &Scenario,
    shift: Option<&ShiftModel>,
    contamination: Option<&ContaminationModel>,
    settings: &ArlSettings,
) -> Result<ArlResult> {
    if settings.n_reps == 0 {
        return Err(Error::InvalidParameters("n_reps must be >= 1".into()));
    }
    let needs_phase1 = !matches!(settings.estimation, Estimation::Known) || !matches!(settings.monitoring, Monitoring::Fixed);
    if needs_phase1 && settings.phase1_size < 2 {
        return Err(Error::InsufficientData { needed: 2, got: settings.phase1_size });
    }
    let shift_vec = match shift {
        Some(s) => s.vector(scenario.p)?,
        None => DVector::zeros(scenario.p),
    };
    let max_len = settings.max_len();
    let known = match settings.estimation {
        Estimation::Known => Some(scenario.true_params()?),
        _ => None,
    };

    let reps = map_indexed(settings.n_reps, |rep| {
        let mut rng = substream(settings.seed, rep as u64);
        match replicate(scenario, &shift_vec, contamination, settings, known.as_ref(), max_len, &mut rng) {
            Ok(r) => r,
            Err(_) => Rep::Skipped,
        }
    });
    collect(
        reps,
        ArlMeta {
            seed: settings.seed,
            scenario: scenario.name.clone(),
            p: scenario.p,
            alpha: settings.chart.alpha,
            cf_order: settings.chart.cf_order,
        },
    )
}

fn replicate<R: Rng>(
    scenario: &Scenario,
    shift: &DVector<f64>,
    contamination: Option<&ContaminationModel>,
    settings: &ArlSettings,
    known: Option<&ProcessParameters>,
    max_len: usize,
    rng: &mut R,
) -> Result<Rep> {
    let mut buf = vec![0.0; scenario.p];
    let draw = |rng: &mut R, buf: &mut [f64]| {
        scenario.sample_into(rng, buf);
        for (v, s) in buf.iter_mut().zip(shift.iter()) {
            *v += s;
        }
    };
    match settings.monitoring {
        Monitoring::Fixed => {
            let estimated;
            let params = match known {
                Some(p) => p,
                None => {
                    let data = phase1_sample(scenario, settings.phase1_size, contamination, rng)?;
                    estimated = estimate(scenario, &data, &settings.estimation, rng)?;
                    &estimated
                }
            };
            let chart = FixedChart::new(params, &settings.chart)?;
            for t in 1..=max_len {
                draw(rng, &mut buf);
                if chart.signals(&buf) {
                    return Ok(Rep::Done { len: t, censored: false });
                }
            }
            Ok(Rep::Done { len: max_len, censored: true })
        }
        Monitoring::SelfStarting { refresh_every } => {
            let data = phase1_sample(scenario, settings.phase1_size, contamination, rng)?;
            let mut state = self_start(scenario, &data, &settings.estimation, settings.chart)?
                .with_refresh_every(refresh_every);
            let mut x = DVector::zeros(scenario.p);
            for t in 1..=max_len {
                draw(rng, x.as_mut_slice());
                if state.monitor_step(&x)?.point.signal {
                    return Ok(Rep::Done { len: t, censored: false });
                }
            }
            Ok(Rep::Done { len: max_len, censored: true })
        }
    }
}

fn self_start(
    scenario: &Scenario,
    data: &DataMatrix,
    estimation: &Estimation,
    config: ChartConfig,
) -> Result<SelfStartState> {
    match estimation {
        Estimation::Known => Ok(SelfStartState::with_fixed_params(scenario.true_params()?, config)),
        Estimation::Classical => SelfStartState::init(data, &PhaseOne::Classical, config),
        Estimation::Robust(cfg) => SelfStartState::init(data, &PhaseOne::Robust(cfg.clone()), config),
    }
}

/// Table-3 style grid of known-parameter ARL₀ over `(p, a)`.
pub fn correlation_sensitivity(
    p_grid: &[usize],
    a_grid: &[f64],
    alpha: f64,
    cf_order: CfOrder,
    n_reps: usize,
    seed: u64,
) -> Result<Vec<(usize, f64, ArlResult)>> {
    let mut out = Vec::with_capacity(p_grid.len() * a_grid.len());
    for &p in p_grid {
        for &a in a_grid {
            let scenario = Scenario::ar1(p, a)?;
            let settings = ArlSettings::known(alpha, cf_order, n_reps, seed)?;
            out.push((p, a, run_arl(&scenario, None, None, &settings)?));
        }
    }
    Ok(out)
}

/// Equal shift on every coordinate giving noncentrality `eta` under the
/// scenario's true parameters.
pub fn eta_targeted_shift(scenario: &Scenario, eta: f64) -> Result<DVector<f64>> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    let params = scenario.true_params()?;
    let inv_d: f64 = params.d_diag.iter().map(|d| 1.0 / d).sum();
    let delta = (eta * (2.0 * params.traces.tr2_hat).sqrt() / inv_d).sqrt();
    let v = DVector::from_element(scenario.p, delta);
    debug_assert!((chart::noncentrality_eta(&ShiftSpec::new(v.clone())?, &params)? - eta).abs() < 1e-9 * eta);
    Ok(v)
}

/// Handling of false alarms during the in-control learning period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreTauPolicy {
    /// Drop the signalling point (not absorbed) and keep monitoring.
    #[default]
    Skip,
    /// Discard the replication and start over with fresh Phase I data.
    Restart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningSettings {
    pub chart: ChartConfig,
    pub phase1_size: usize,
    pub estimation: Estimation,
    pub refresh_every: usize,
    pub eta: f64,
    pub n_reps: usize,
    pub max_len: Option<usize>,
    pub policy: PreTauPolicy,
    /// Restart budget per replication under [`PreTauPolicy::Restart`].
    pub max_restarts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningPoint {
    pub tau: usize,
    pub arl1: f64,
    pub std_err: f64,
    pub n_reps: usize,
    pub censored: usize,
    pub skipped: usize,
    /// Signals during the first `tau` in-control steps, summed over replications.
    pub pre_tau_signals: usize,
}

/// Post-shift run length of a self-starting chart after `tau` in-control
/// observations, for each `tau` in the grid.
pub fn learning_time_experiment(
    scenario: &Scenario,
    tau_grid: &[usize],
    settings: &LearningSettings,
) -> Result<Vec<LearningPoint>> {
    if settings.n_reps == 0 {
        return Err(Error::InvalidParameters("n_reps must be >= 1".into()));
    }
    let shift = eta_targeted_shift(scenario, settings.eta)?;
    let max_len = settings.max_len.unwrap_or_else(|| (DEFAULT_MAX_LEN_FACTOR / settings.chart.alpha).ceil() as usize);
    let mut out = Vec::with_capacity(tau_grid.len());
    for (g, &tau) in tau_grid.iter().enumerate() {
        let reps = map_indexed(settings.n_reps, |rep| {
            let mut rng = substream(settings.seed, ((g as u64) << 32) | rep as u64);
            learning_rep(scenario, &shift, tau, settings, max_len, &mut rng).unwrap_or((Rep::Skipped, 0))
        });
        let pre_tau_signals = reps.iter().map(|r| r.1).sum();
        let res = collect(
            reps.into_iter().map(|r| r.0).collect(),
            ArlMeta {
                seed: settings.seed,
                scenario: scenario.name.clone(),
                p: scenario.p,
                alpha: settings.chart.alpha,
                cf_order: settings.chart.cf_order,
            },
        )?;
        out.push(LearningPoint {
            tau,
            arl1: res.arl_hat,
            std_err: res.std_err,
            n_reps: res.n_reps,
            censored: res.censored,
            skipped: res.skipped,
            pre_tau_signals,
        });
    }
    Ok(out)
}

fn learning_rep<R: Rng>(
    scenario: &Scenario,
    shift: &DVector<f64>,
    tau: usize,
    settings: &LearningSettings,
    max_len: usize,
    rng: &mut R,
) -> Result<(Rep, usize)> {
    let mut x = DVector::zeros(scenario.p);
    let mut pre = 0;
    let mut restarts = 0;
    'attempt: loop {
        let data = phase1_sample(scenario, settings.phase1_size, None, rng)?;
        let mut state = self_start(scenario, &data, &settings.estimation, settings.chart)?
            .with_refresh_every(settings.refresh_every);
        for _ in 0..tau {
            scenario.sample_into(rng, x.as_mut_slice());
            if state.monitor_step(&x)?.point.signal {
                pre += 1;
                match settings.policy {
                    PreTauPolicy::Skip => state.resume(),
                    PreTauPolicy::Restart => {
                        restarts += 1;
                        if restarts > settings.max_restarts {
                            return Ok((Rep::Skipped, pre));
                        }
                        continue 'attempt;
                    }
                }
            }
        }
        for t in 1..=max_len {
            scenario.sample_into(rng, x.as_mut_slice());
            x += shift;
            if state.monitor_step(&x)?.point.signal {
                return Ok((Rep::Done { len: t, censored: false }, pre));
            }
        }
        return Ok((Rep::Done { len: max_len, censored: true }, pre));
    }
}

/// Exact ARL under known parameters for a fixed per-point signal probability.
pub fn geometric_arl(signal_prob: f64) -> Result<f64> {
    if !(signal_prob > 0.0 && signal_prob <= 1.0) {
        return Err(Error::Domain(format!("signal probability must be in (0, 1], got {signal_prob}")));
    }
    Ok(1.0 / signal_prob)
}

/// Fraction of in-control points signalling over `n_points` draws with known
/// parameters. Points are generated in blocks on independent substreams.
pub fn in_control_signal_rate(scenario: &Scenario, config: &ChartConfig, n_points: usize, seed: u64) -> Result<f64> {
    const BLOCK: usize = 10_000;
    let params = scenario.true_params()?;
    let chart = FixedChart::new(&params, config)?;
    let blocks = n_points.div_ceil(BLOCK);
    let counts = map_indexed(blocks, |b| {
        let mut rng = substream(seed, b as u64);
        let n = BLOCK.min(n_points - b * BLOCK);
        let mut buf = vec![0.0; scenario.p];
        let mut hits = 0usize;
        for _ in 0..n {
            scenario.sample_into(&mut rng, &mut buf);
            hits += usize::from(chart.signals(&buf));
        }
        hits
    });
    Ok(counts.iter().sum::<usize>() as f64 / n_points as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar_zero_matches_identity() {
        let a = Scenario::ar1(6, 0.0).unwrap();
        let i = Scenario::identity(6);
        let mut r1 = substream(1, 0);
        let mut r2 = substream(1, 0);
        assert_eq!(a.sample_observation(&mut r1), i.sample_observation(&mut r2));
        assert_eq!(a.covariance(), i.covariance());
    }

    #[test]
    fn scenario_validation() {
        assert!(Scenario::ar1(5, 1.0).is_err());
        assert!(Scenario::ar1(5, -0.1).is_err());
        assert!(Scenario::new("x", 0, Structure::Identity).is_err());
        assert!(Scenario::identity(3).with_mean(DVector::zeros(2)).is_err());
    }

    #[test]
    fn shift_vectors() {
        let v = ShiftModel::fraction(0.2, 1.0).vector(20).unwrap();
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 4);
        assert_eq!(v.rows(0, 4).sum(), 4.0);
        let c = ShiftModel::Coordinates { coordinates: vec![1, 3], delta: 2.0 };
        assert_eq!(c.vector(4).unwrap().as_slice(), &[0.0, 2.0, 0.0, 2.0]);
        assert!(c.vector(3).is_err());
        assert!(ShiftModel::fraction(1.5, 1.0).vector(3).is_err());
    }

    #[test]
    fn contamination_counts() {
        let c = ContaminationModel::new(0.2, ShiftModel::fraction(0.5, 3.0)).unwrap();
        assert_eq!(c.n_outliers(200), 40);
        assert_eq!(c.n_outliers(9), 1);
        assert!(ContaminationModel::new(0.5, ShiftModel::fraction(0.5, 3.0)).is_err());
    }

    #[test]
    fn eta_shift_solves_target() {
        let s = Scenario::identity(50);
        let v = eta_targeted_shift(&s, 5.0).unwrap();
        let params = s.true_params().unwrap();
        let eta = chart::noncentrality_eta(&ShiftSpec::new(v).unwrap(), &params).unwrap();
        assert!((eta - 5.0).abs() < 1e-12);
    }

    #[test]
    fn summary_statistics() {
        let (m, se) = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn huge_shift_gives_run_length_one() {
        let s = Scenario::identity(10);
        let settings = ArlSettings::known(0.005, CfOrder::First, 50, 3).unwrap();
        let r = run_arl(&s, Some(&ShiftModel::fraction(1.0, 50.0)), None, &settings).unwrap();
        assert_eq!(r.arl_hat, 1.0);
        assert_eq!(r.std_err, 0.0);
        assert_eq!(r.censored, 0);
    }

    #[test]
    fn censoring_is_counted() {
        let s = Scenario::identity(5);
        let mut settings = ArlSettings::known(0.005, CfOrder::First, 20, 3).unwrap();
        settings.max_len = Some(1);
        let r = run_arl(&s, None, None, &settings).unwrap();
        assert!(r.censored > 0);
        assert!(r.arl_hat <= 1.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let s = Scenario::ar1(8, 0.5).unwrap();
        let settings = ArlSettings::known(0.05, CfOrder::First, 200, 11).unwrap();
        let a = run_arl(&s, None, None, &settings).unwrap();
        let b = run_arl(&s, None, None, &settings).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn skip_rate_cap() {
        // A constant Phase I column makes every classical estimate fail.
        let s = Scenario::identity(3);
        let mut settings = ArlSettings::known(0.05, CfOrder::First, 10, 1).unwrap();
        settings.estimation = Estimation::Classical;
        settings.phase1_size = 1;
        assert!(run_arl(&s, None, None, &settings).is_err());
        let reps = vec![Rep::Skipped; 2].into_iter().chain(vec![Rep::Done { len: 1, censored: false }; 98]).collect();
        let meta = || ArlMeta { seed: 0, scenario: String::new(), p: 1, alpha: 0.1, cf_order: CfOrder::None };
        assert!(matches!(collect(reps, meta()), Err(Error::SkipRateExceeded { failed: 2, total: 100 })));
        let reps = vec![Rep::Skipped].into_iter().chain(vec![Rep::Done { len: 1, censored: false }; 99]).collect();
        assert_eq!(collect(reps, meta()).unwrap().skipped, 1);
    }

    #[test]
    fn classical_and_self_starting_run() {
        let s = Scenario::identity(10);
        let mut settings = ArlSettings::known(0.05, CfOrder::First, 20, 5).unwrap();
        settings.estimation = Estimation::Classical;
        settings.phase1_size = 30;
        let fixed = run_arl(&s, None, None, &settings).unwrap();
        settings.monitoring = Monitoring::SelfStarting { refresh_every: 1 };
        let ss = run_arl(&s, None, None, &settings).unwrap();
        assert_eq!(fixed.n_reps, 20);
        assert_eq!(ss.n_reps, 20);
    }

    #[test]
    fn learning_time_small() {
        let s = Scenario::identity(10);
        let settings = LearningSettings {
            chart: ChartConfig::new(0.005, CfOrder::First).unwrap(),
            phase1_size: 10,
            estimation: Estimation::Classical,
            refresh_every: 1,
            eta: 5.0,
            n_reps: 10,
            max_len: None,
            policy: PreTauPolicy::Skip,
            max_restarts: 100,
            seed: 9,
        };
        let pts = learning_time_experiment(&s, &[5, 20], &settings).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(pts.iter().all(|p| p.arl1 >= 1.0 && p.n_reps == 10));
        let mut restart = settings.clone();
        restart.policy = PreTauPolicy::Restart;
        assert_eq!(learning_time_experiment(&s, &[5], &restart).unwrap()[0].n_reps, 10);
    }

    #[test]
    fn signal_rate_extremes() {
        let s = Scenario::identity(4);
        let cfg = ChartConfig::new(0.05, CfOrder::First).unwrap();
        let r = in_control_signal_rate(&s, &cfg, 25_000, 1).unwrap();
        assert!(r > 0.0 && r < 0.2);
        assert!(geometric_arl(0.0).is_err());
        assert_eq!(geometric_arl(0.05).unwrap(), 20.0);
    }
}
