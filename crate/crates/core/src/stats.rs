//! Batch moment estimation: sample mean, covariance and correlation, traces
//! of correlation-matrix powers, and the high-dimensional trace estimators
//! used to set control limits.
//!
//! All reductions go through [`NeumaierSum`] so results do not depend on
//! summation order beyond ~1e-12 relative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sum::{sum, NeumaierSum};

/// Reference sample, one observation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix(DMatrix<f64>);

impl DataMatrix {
    /// Wraps a matrix, rejecting empty shapes and non-finite entries.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "data matrix must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        for c in 0..values.ncols() {
            for r in 0..values.nrows() {
                if !values[(r, c)].is_finite() {
                    return Err(Error::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
            return Err(Error::Dimension(format!(
                "row {i} has {} columns, expected {p}",
                r.len()
            )));
        }
        Self::new(DMatrix::from_fn(m, p, |i, j| rows[i][j]))
    }

    /// Number of observations.
    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    /// Number of variables.
    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.0.row(i).transpose()
    }

    pub fn rows(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        (0..self.nrows()).map(move |i| self.row(i))
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.0.select_rows(idx))
    }
}

/// Sample covariance `S` and its diagonal `D_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSummary {
    pub s: DMatrix<f64>,
    pub d_s: DVector<f64>,
}

pub fn sample_mean(data: &DataMatrix) -> DVector<f64> {
    let x = data.matrix();
    let m = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| sum(c.iter().copied()) / m))
}

pub fn sample_covariance(data: &DataMatrix) -> Result<CovarianceSummary> {
    let m = data.nrows();
    if m < 2 {
        return Err(Error::InsufficientData { needed: 2, got: m });
    }
    let mean = sample_mean(data);
    let mut centered = data.matrix().clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let p = data.ncols();
    let denom = (m - 1) as f64;
    let mut s = DMatrix::zeros(p, p);
    for a in 0..p {
        let ca = centered.column(a);
        for b in a..p {
            let cb = centered.column(b);
            let v = sum(ca.iter().zip(cb.iter()).map(|(x, y)| x * y)) / denom;
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    let d_s = s.diagonal();
    if let Some(j) = d_s.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateVariable { column: j });
    }
    Ok(CovarianceSummary { s, d_s })
}

/// `R = D_S^{-1/2} S D_S^{-1/2}` with the diagonal set to exactly one.
pub fn correlation(cov: &CovarianceSummary) -> Result<DMatrix<f64>> {
    correlation_from_scatter(&cov.s)
}

/// Correlation from any positive multiple of a covariance matrix (the
/// scaling cancels), e.g. the running scatter `Q_j`.
pub fn correlation_from_scatter(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let p = s.nrows();
    if let Some(j) = (0..p).find(|&j| !(s[(j, j)] > 0.0)) {
        return Err(Error::DegenerateVariable { column: j });
    }
    let mut r = DMatrix::from_fn(p, p, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt());
    for j in 0..p {
        r[(j, j)] = 1.0;
    }
    Ok(r)
}

fn compensated_trace(m: &DMatrix<f64>) -> f64 {
    sum((0..m.nrows()).map(|i| m[(i, i)]))
}

/// Σ_ij A_ij B_ji, i.e. tr(AB), without forming the product.
fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = NeumaierSum::new();
    for i in 0..n {
        for j in 0..n {
            acc.add(a[(i, j)] * b[(j, i)]);
        }
    }
    acc.value()
}

/// Exact `tr(M^k)` by repeated squaring.
pub fn trace_power(m: &DMatrix<f64>, k: u32) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "trace_power needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    match k {
        0 => Err(Error::Domain("trace_power exponent must be >= 1".into())),
        1 => Ok(compensated_trace(m)),
        _ => {
            // tr(M^k) = tr(M^(k-1) M)
            let lower = matrix_power(m, k - 1);
            Ok(trace_of_product(&lower, m))
        }
    }
}

fn matrix_power(m: &DMatrix<f64>, mut k: u32) -> DMatrix<f64> {
    let mut result: Option<DMatrix<f64>> = None;
    let mut base = m.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => &r * &base,
            });
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result.expect("k >= 1")
}

/// `tr(R^2)`, `tr(R^3)`, `tr(R^4)` of a symmetric matrix from a single product.
pub fn symmetric_traces(r: &DMatrix<f64>) -> Result<(f64, f64, f64)> {
    if !r.is_square() {
        return Err(Error::Dimension("correlation matrix must be square".into()));
    }
    let tr2 = sum(r.iter().map(|v| v * v));
    let r2 = r * r;
    let tr3 = sum(r2.iter().zip(r.iter()).map(|(a, b)| a * b));
    let tr4 = sum(r2.iter().map(|v| v * v));
    Ok((tr2, tr3, tr4))
}

fn check_m(m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::InsufficientData { needed: 2, got: m });
    }
    Ok(m as f64)
}

fn tr2_estimate_from(tr_r2: f64, p: f64, m: f64) -> Result<f64> {
    let v = tr_r2 - p * p / m;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::IllConditioned { value: v })
    }
}

fn tr3_estimate_from(tr_r3: f64, tr_r2: f64, p: f64, m: f64) -> f64 {
    tr_r3 - 3.0 * p / m * tr_r2 + 2.0 * p.powi(3) / (m * m)
}

fn correction_from(tr2_hat: f64, p: f64, m: f64) -> f64 {
    1.0 + 2.0 * p / (m * tr2_hat.sqrt())
}

/// Consistent estimate of `tr(ρ²)`: `tr(R²) − p²/m`.
pub fn estimate_tr_rho2(r: &DMatrix<f64>, m: usize) -> Result<f64> {
    let m = check_m(m)?;
    let p = r.nrows() as f64;
    tr2_estimate_from(trace_power(r, 2)?, p, m)
}

/// Consistent estimate of `tr(ρ³)`: `tr(R³) − (3p/m) tr(R²) + 2p³/m²`. May be negative.
pub fn estimate_tr_rho3(r: &DMatrix<f64>, m: usize) -> Result<f64> {
    let m = check_m(m)?;
    let p = r.nrows() as f64;
    Ok(tr3_estimate_from(trace_power(r, 3)?, trace_power(r, 2)?, p, m))
}

/// Finite-sample correction `c = 1 + 2p / (m √(tr(R²) − p²/m))`.
pub fn correction_coefficient(r: &DMatrix<f64>, m: usize) -> Result<f64> {
    let mf = check_m(m)?;
    let p = r.nrows() as f64;
    let tr2 = estimate_tr_rho2(r, m)?;
    Ok(correction_from(tr2, p, mf))
}

/// Trace quantities that set the control limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimates {
    pub p: usize,
    /// Sample size behind the estimates; `None` for known parameters.
    pub m_eff: Option<usize>,
    pub tr2_hat: f64,
    pub tr3_hat: f64,
    /// Plug-in `tr(R⁴)` when estimated; exact when known.
    pub tr4_hat: Option<f64>,
    pub c_pm: f64,
}

impl TraceEstimates {
    /// Exact traces of a known correlation matrix, `c = 1`.
    pub fn known(rho: &DMatrix<f64>) -> Result<Self> {
        let (tr2, tr3, tr4) = symmetric_traces(rho)?;
        Self::from_values(rho.nrows(), None, tr2, tr3, Some(tr4), 1.0)
    }

    /// Estimates from a sample correlation matrix computed on `m` rows.
    pub fn estimate(r: &DMatrix<f64>, m: usize) -> Result<Self> {
        let mf = check_m(m)?;
        let p = r.nrows() as f64;
        let (tr_r2, tr_r3, tr_r4) = symmetric_traces(r)?;
        let tr2 = tr2_estimate_from(tr_r2, p, mf)?;
        let tr3 = tr3_estimate_from(tr_r3, tr_r2, p, mf);
        Self::from_values(r.nrows(), Some(m), tr2, tr3, Some(tr_r4), correction_from(tr2, p, mf))
    }

    pub fn from_values(
        p: usize,
        m_eff: Option<usize>,
        tr2_hat: f64,
        tr3_hat: f64,
        tr4_hat: Option<f64>,
        c_pm: f64,
    ) -> Result<Self> {
        if !(tr2_hat > 0.0) || !tr2_hat.is_finite() {
            return Err(Error::IllConditioned { value: tr2_hat });
        }
        if !tr3_hat.is_finite() {
            return Err(Error::InvalidParameters("tr3 is not finite".into()));
        }
        if !(c_pm >= 1.0) || !c_pm.is_finite() {
            return Err(Error::InvalidParameters(format!("c_pm must be >= 1, got {c_pm}")));
        }
        if let Some(t4) = tr4_hat {
            if !(t4 >= 0.0) || !t4.is_finite() {
                return Err(Error::InvalidParameters(format!("tr4 must be >= 0, got {t4}")));
            }
        }
        Ok(Self { p, m_eff, tr2_hat, tr3_hat, tr4_hat, c_pm })
    }
}

/// AR(1) correlation matrix `a^{|i-j|}`.
pub fn ar1_correlation(p: usize, a: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| a.powi(i.abs_diff(j) as i32))
}
