//! The charting statistics and decision rule.
//!
//! An observation `x` is reduced to the diagonal distance
//! `M² = Σ (x_j − μ_j)² / σ_jj`, standardized to
//! `U = (M² − p) / (c √(2 tr ρ²))`, and compared against `z_α` after removing
//! the Cornish–Fisher skewness shift.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cornish_fisher::{self, normal_cdf, normal_quantile};
use crate::error::{Error, Result};
use crate::stats::TraceEstimates;
use crate::sum::sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSource {
    Known,
    Classical,
    Robust,
}

/// In-control mean, per-variable variances and correlation traces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessParameters {
    pub mu: DVector<f64>,
    pub d_diag: DVector<f64>,
    pub traces: TraceEstimates,
    pub source: ParamSource,
}

impl ProcessParameters {
    pub fn new(
        mu: DVector<f64>,
        d_diag: DVector<f64>,
        traces: TraceEstimates,
        source: ParamSource,
    ) -> Result<Self> {
        if mu.len() != d_diag.len() || traces.p != mu.len() {
            return Err(Error::Dimension(format!(
                "mu has {} entries, d_diag {}, traces built for p = {}",
                mu.len(),
                d_diag.len(),
                traces.p
            )));
        }
        if let Some(j) = d_diag.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameters(format!("variance of variable {j} must be positive")));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("mean has non-finite entries".into()));
        }
        if !(traces.tr2_hat > 0.0) {
            return Err(Error::InvalidParameters("tr2 must be positive".into()));
        }
        Ok(Self { mu, d_diag, traces, source })
    }

    /// Known parameters from a full covariance matrix.
    pub fn known(mu: DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        let rho = crate::stats::correlation_from_scatter(sigma)?;
        let traces = TraceEstimates::known(&rho)?;
        Self::new(mu, sigma.diagonal(), traces, ParamSource::Known)
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    /// Scale correction actually applied to `U` under `apply_correction`.
    pub fn correction(&self, apply_correction: bool) -> f64 {
        if apply_correction && self.source != ParamSource::Known {
            self.traces.c_pm
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CfOrder {
    None,
    First,
    Second,
}

impl TryFrom<u8> for CfOrder {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(CfOrder::None),
            1 => Ok(CfOrder::First),
            2 => Ok(CfOrder::Second),
            _ => Err(format!("cf_order must be 0, 1 or 2, got {v}")),
        }
    }
}

impl From<CfOrder> for u8 {
    fn from(o: CfOrder) -> u8 {
        match o {
            CfOrder::None => 0,
            CfOrder::First => 1,
            CfOrder::Second => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartConfig {
    pub alpha: f64,
    pub cf_order: CfOrder,
    /// Multiply the estimated scale of `U` by `c_{p,m}` (inert for known parameters).
    pub apply_correction: bool,
    z_alpha: f64,
}

impl ChartConfig {
    pub fn new(alpha: f64, cf_order: CfOrder) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(Error::Domain(format!("alpha must be in (0, 0.5), got {alpha}")));
        }
        Ok(Self { alpha, cf_order, apply_correction: true, z_alpha: normal_quantile(alpha)? })
    }

    pub fn with_correction(mut self, apply: bool) -> Self {
        self.apply_correction = apply;
        self
    }

    pub fn z_alpha(&self) -> f64 {
        self.z_alpha
    }

    /// Upper control limit on the `U` scale for these traces.
    pub fn ucl(&self, traces: &TraceEstimates) -> Result<f64> {
        let z = self.z_alpha;
        match self.cf_order {
            CfOrder::None => Ok(z),
            CfOrder::First => Ok(z + cornish_fisher::skew_shift(traces.tr2_hat, traces.tr3_hat, z)),
            CfOrder::Second => {
                let tr4 = traces.tr4_hat.ok_or_else(|| {
                    Error::InvalidParameters("second-order limit needs tr(rho^4)".into())
                })?;
                cornish_fisher::cf_quantile_second_order(traces.tr2_hat, traces.tr3_hat, tr4, self.alpha)
            }
        }
    }
}

/// One evaluated observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub index: usize,
    pub m2: f64,
    pub u: f64,
    pub z: f64,
    pub signal: bool,
    pub ucl: f64,
}

/// Mean shift `μ₁ − μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub delta: DVector<f64>,
}

impl ShiftSpec {
    pub fn new(delta: DVector<f64>) -> Result<Self> {
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("shift has non-finite entries".into()));
        }
        Ok(Self { delta })
    }
}

fn check_dim(x: &DVector<f64>, p: usize) -> Result<()> {
    if x.len() != p {
        return Err(Error::Dimension(format!("observation has {} entries, expected {p}", x.len())));
    }
    Ok(())
}

/// `M² = Σ_j (x_j − μ_j)² / σ_jj`.
pub fn modified_distance(x: &DVector<f64>, params: &ProcessParameters) -> Result<f64> {
    check_dim(x, params.p())?;
    Ok(modified_distance_unchecked(x.as_slice(), params.mu.as_slice(), params.d_diag.as_slice()))
}

#[inline]
pub(crate) fn modified_distance_unchecked(x: &[f64], mu: &[f64], d: &[f64]) -> f64 {
    sum(x.iter().zip(mu).zip(d).map(|((x, m), s)| {
        let e = x - m;
        e * e / s
    }))
}

pub fn u_statistic(m2: f64, params: &ProcessParameters, apply_correction: bool) -> Result<f64> {
    let tr2 = params.traces.tr2_hat;
    if !(tr2 > 0.0) {
        return Err(Error::InvalidParameters(format!("tr2 must be positive, got {tr2}")));
    }
    let c = params.correction(apply_correction);
    Ok((m2 - params.p() as f64) / (c * (2.0 * tr2).sqrt()))
}

/// Decision on `U`: returns `(z, signal, ucl)`.
///
/// `ucl = z_α + s` and `z = U − s` with `s = ucl − z_α` recomputed from the
/// rounded limit, so `z > z_α` and `U > ucl` agree bit-for-bit.
pub fn chart_decision(u: f64, params: &ProcessParameters, config: &ChartConfig) -> Result<(f64, bool, f64)> {
    let ucl = config.ucl(&params.traces)?;
    let shift = ucl - config.z_alpha;
    let z = u - shift;
    Ok((z, z > config.z_alpha, ucl))
}

/// Full evaluation of one observation.
pub fn evaluate(
    index: usize,
    x: &DVector<f64>,
    params: &ProcessParameters,
    config: &ChartConfig,
) -> Result<ChartPoint> {
    let m2 = modified_distance(x, params)?;
    let u = u_statistic(m2, params, config.apply_correction)?;
    let (z, signal, ucl) = chart_decision(u, params, config)?;
    Ok(ChartPoint { index, m2, u, z, signal, ucl })
}

/// Nominal in-control ARL, `1/α`.
pub fn nominal_arl0(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(1.0 / alpha)
}

/// `η = δ′D⁻¹δ / √(2 tr ρ²)`.
pub fn noncentrality_eta(shift: &ShiftSpec, params: &ProcessParameters) -> Result<f64> {
    check_dim(&shift.delta, params.p())?;
    let q = sum(shift.delta.iter().zip(params.d_diag.iter()).map(|(d, s)| d * d / s));
    Ok(q / (2.0 * params.traces.tr2_hat).sqrt())
}

/// Asymptotic out-of-control ARL `1 / (1 − Φ(z_α − η))`.
pub fn nominal_arl1(eta: f64, alpha: f64) -> Result<f64> {
    if !(eta >= 0.0) {
        return Err(Error::Domain(format!("eta must be >= 0, got {eta}")));
    }
    let z = normal_quantile(alpha)?;
    // 1 − Φ(t) = Φ(−t) keeps precision in the tail.
    Ok(1.0 / normal_cdf(eta - z))
}

/// Full-covariance Mahalanobis distance `(x−μ)′Σ⁻¹(x−μ)`; small-p baseline only.
pub fn chisq_t2_baseline(x: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    check_dim(x, mu.len())?;
    if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
        return Err(Error::Dimension("covariance does not match mean".into()));
    }
    let chol = sigma.clone().cholesky().ok_or(Error::Singular)?;
    let e = x - mu;
    let y = chol.solve(&e);
    Ok(e.dot(&y))
}
