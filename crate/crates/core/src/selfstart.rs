//! Self-starting monitoring: every observation is charted against the
//! current estimates and, if in control, absorbed into them.
//!
//! Running moments use the rank-one recursion
//! `A_j = X_j − X̄_{j−1}`, `Q_j = Q_{j−1} + ((j−1)/j) A_j A_jᵀ`,
//! `X̄_j = ((j−1) X̄_{j−1} + X_j) / j`, `S_j = Q_j / (j−1)`.
//! State size is O(p²) regardless of stream length.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chart::{self, CfOrder, ChartConfig, ChartPoint, ParamSource, ProcessParameters};
use crate::error::{Error, Result};
use crate::robust::{self, RobustConfig};
use crate::stats::{self, DataMatrix, TraceEstimates};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfStartState {
    j: usize,
    xbar: DVector<f64>,
    q: DMatrix<f64>,
    params: ProcessParameters,
    config: ChartConfig,
    /// Re-estimate parameters every this many absorptions; 0 keeps them fixed.
    refresh_every: usize,
    pending: usize,
    stale: bool,
    version: u64,
    steps: usize,
    frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorOutcome {
    pub point: ChartPoint,
    pub absorbed: bool,
    pub state_version: u64,
    /// The last refresh could not produce valid traces; previous ones were kept.
    pub stale: bool,
}

/// First-signal bookkeeping for a monitored stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// 1-based index of the first signal, if any.
    pub run_length: Option<usize>,
    /// Observations monitored (equals `run_length` when signalled).
    pub observed: usize,
    pub points: Vec<ChartPoint>,
}

impl RunRecord {
    pub fn censored(&self) -> bool {
        self.run_length.is_none()
    }
}

fn rank_one_update(j: &mut usize, xbar: &mut DVector<f64>, q: &mut DMatrix<f64>, x: &DVector<f64>) {
    let jn = *j + 1;
    let a = x - &*xbar;
    let w = (jn - 1) as f64 / jn as f64;
    let p = a.len();
    for c in 0..p {
        let wa = w * a[c];
        for r in 0..=c {
            let v = q[(r, c)] + wa * a[r];
            q[(r, c)] = v;
            q[(c, r)] = v;
        }
    }
    *xbar = (&*xbar * (jn - 1) as f64 + x) / jn as f64;
    *j = jn;
}

fn params_from_moments(
    j: usize,
    xbar: &DVector<f64>,
    q: &DMatrix<f64>,
    source: ParamSource,
) -> Result<ProcessParameters> {
    if j < 2 {
        return Err(Error::InsufficientData { needed: 2, got: j });
    }
    let d = q.diagonal() / (j - 1) as f64;
    let r = stats::correlation_from_scatter(q)?;
    let traces = TraceEstimates::estimate(&r, j)?;
    ProcessParameters::new(xbar.clone(), d, traces, source)
}

/// How Phase I estimates are seeded.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseOne {
    Classical,
    Robust(RobustConfig),
}

impl SelfStartState {
    /// Seeds the state from a Phase I sample.
    pub fn init(phase1: &DataMatrix, estimation: &PhaseOne, config: ChartConfig) -> Result<Self> {
        let m = phase1.nrows();
        if m < 2 {
            return Err(Error::InsufficientData { needed: 2, got: m });
        }
        let (rows, source) = match estimation {
            PhaseOne::Classical => (phase1.clone(), ParamSource::Classical),
            PhaseOne::Robust(cfg) => {
                let est = robust::rmdp_estimate(phase1, cfg)?;
                (phase1.select_rows(&est.subset_indices)?, ParamSource::Robust)
            }
        };
        let p = rows.ncols();
        let mut j = 0;
        let mut xbar = DVector::zeros(p);
        let mut q = DMatrix::zeros(p, p);
        // Seed by batch computation; the recursion takes over from here.
        let cov = stats::sample_covariance(&rows)?;
        j += rows.nrows();
        xbar.copy_from(&stats::sample_mean(&rows));
        q.copy_from(&(cov.s * (j - 1) as f64));
        let params = params_from_moments(j, &xbar, &q, source)?;
        Ok(Self {
            j,
            xbar,
            q,
            params,
            config,
            refresh_every: 1,
            pending: 0,
            stale: false,
            version: 0,
            steps: 0,
            frozen: false,
        })
    }

    /// A chart that never re-estimates: run lengths are i.i.d. geometric
    /// under in-control sampling.
    pub fn with_fixed_params(params: ProcessParameters, config: ChartConfig) -> Self {
        let p = params.p();
        Self {
            j: 0,
            xbar: DVector::zeros(p),
            q: DMatrix::zeros(p, p),
            params,
            config,
            refresh_every: 0,
            pending: 0,
            stale: false,
            version: 0,
            steps: 0,
            frozen: false,
        }
    }

    pub fn with_refresh_every(mut self, k: usize) -> Self {
        self.refresh_every = k;
        self
    }

    pub fn j(&self) -> usize {
        self.j
    }
    pub fn xbar(&self) -> &DVector<f64> {
        &self.xbar
    }
    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.q
    }
    /// `S_j = Q_j / (j − 1)`.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.j >= 2).then(|| &self.q / (self.j - 1) as f64)
    }
    pub fn params(&self) -> &ProcessParameters {
        &self.params
    }
    pub fn config(&self) -> &ChartConfig {
        &self.config
    }
    pub fn version(&self) -> u64 {
        self.version
    }
    pub fn is_stale(&self) -> bool {
        self.stale
    }
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Absorbs `x` into the running moments (no charting, no refresh).
    pub fn update(&mut self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.xbar.len() {
            return Err(Error::Dimension(format!("observation has {} entries, expected {}", x.len(), self.xbar.len())));
        }
        rank_one_update(&mut self.j, &mut self.xbar, &mut self.q, x);
        self.version += 1;
        Ok(())
    }

    /// Parameters re-estimated from the running moments.
    pub fn refresh_params(&self) -> Result<ProcessParameters> {
        params_from_moments(self.j, &self.xbar, &self.q, self.params.source)
    }

    /// Refreshes in place. An ill-conditioned trace estimate keeps the
    /// previous traces and marks the state stale.
    pub fn refresh(&mut self) -> Result<()> {
        match self.refresh_params() {
            Ok(p) => {
                self.params = p;
                self.stale = false;
            }
            Err(Error::IllConditioned { .. }) => {
                let d = self.q.diagonal() / (self.j - 1) as f64;
                self.params = ProcessParameters::new(self.xbar.clone(), d, self.params.traces.clone(), self.params.source)?;
                self.stale = true;
            }
            Err(e) => return Err(e),
        }
        self.pending = 0;
        Ok(())
    }

    /// Charts `x`; absorbs it only if it does not signal. A signal freezes
    /// the state until [`resume`](Self::resume).
    pub fn monitor_step(&mut self, x: &DVector<f64>) -> Result<MonitorOutcome> {
        if self.frozen {
            return Err(Error::Domain("state is frozen after a signal; call resume()".into()));
        }
        self.steps += 1;
        let point = chart::evaluate(self.steps, x, &self.params, &self.config)?;
        if point.signal {
            self.frozen = true;
            return Ok(MonitorOutcome { point, absorbed: false, state_version: self.version, stale: self.stale });
        }
        if self.refresh_every > 0 {
            self.update(x)?;
            self.pending += 1;
            if self.pending >= self.refresh_every {
                self.refresh()?;
            }
        }
        Ok(MonitorOutcome { point, absorbed: true, state_version: self.version, stale: self.stale })
    }

    /// Clears the post-signal freeze; the signalling point stays excluded.
    pub fn resume(&mut self) {
        self.frozen = false;
    }

    /// Monitors until the first signal or the end of `observations`.
    pub fn run_stream<'a, I>(&mut self, observations: I) -> Result<RunRecord>
    where
        I: IntoIterator<Item = &'a DVector<f64>>,
    {
        let mut points = Vec::new();
        for x in observations {
            let out = self.monitor_step(x)?;
            points.push(out.point);
            if out.point.signal {
                return Ok(RunRecord { run_length: Some(points.len()), observed: points.len(), points });
            }
        }
        if points.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        Ok(RunRecord { run_length: None, observed: points.len(), points })
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            format_version: SNAPSHOT_FORMAT_VERSION,
            j: self.j,
            xbar: self.xbar.iter().copied().collect(),
            q: self.q.row_iter().map(|r| r.iter().copied().collect()).collect(),
            alpha: self.config.alpha,
            cf_order: self.config.cf_order,
            source: self.params.source,
            apply_correction: self.config.apply_correction,
            refresh_every: self.refresh_every,
            pending: self.pending,
            mu: self.params.mu.iter().copied().collect(),
            d_diag: self.params.d_diag.iter().copied().collect(),
            traces: self.params.traces.clone(),
            stale: self.stale,
            version: self.version,
            steps: self.steps,
            frozen: self.frozen,
        }
    }

    pub fn from_snapshot(s: StateSnapshot) -> Result<Self> {
        if s.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: s.format_version, expected: SNAPSHOT_FORMAT_VERSION });
        }
        let p = s.xbar.len();
        if s.q.len() != p || s.q.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("snapshot scatter matrix does not match xbar".into()));
        }
        let q = DMatrix::from_fn(p, p, |r, c| s.q[r][c]);
        let config = ChartConfig::new(s.alpha, s.cf_order)?.with_correction(s.apply_correction);
        let params = ProcessParameters::new(DVector::from_vec(s.mu), DVector::from_vec(s.d_diag), s.traces, s.source)?;
        Ok(Self {
            j: s.j,
            xbar: DVector::from_vec(s.xbar),
            q,
            params,
            config,
            refresh_every: s.refresh_every,
            pending: s.pending,
            stale: s.stale,
            version: s.version,
            steps: s.steps,
            frozen: s.frozen,
        })
    }
}

/// Versioned JSON form of a [`SelfStartState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub format_version: u32,
    pub j: usize,
    pub xbar: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub alpha: f64,
    pub cf_order: CfOrder,
    pub source: ParamSource,
    pub apply_correction: bool,
    pub refresh_every: usize,
    #[serde(default)]
    pub pending: usize,
    pub mu: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub traces: TraceEstimates,
    pub stale: bool,
    pub version: u64,
    pub steps: usize,
    pub frozen: bool,
}
