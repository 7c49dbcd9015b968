//! Outlier-resistant Phase I estimation under the diagonal metric.
//!
//! The search looks for the `h`-subset whose marginal variances have the
//! smallest product (minimum diagonal product), using concentration steps:
//! given a subset, rank every row by its diagonal distance to the subset's
//! mean and variances and keep the `h` closest. The objective never
//! increases across steps. The winning subset's variances are rescaled for
//! consistency under normality, rows are flagged with the chart rule at
//! `outlier_alpha`, and final estimates are recomputed from the unflagged
//! rows in a single reweighting pass.
//!
//! Nothing here inverts a covariance matrix, so `p > h` is fine.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::chart::{self, CfOrder, ChartConfig, ParamSource, ProcessParameters};
use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::stats::{self, DataMatrix, TraceEstimates};
use crate::sum::NeumaierSum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    /// Subset size; `None` means `⌊m/2⌋ + 1`.
    pub h: Option<usize>,
    pub n_starts: usize,
    pub max_c_steps: usize,
    pub outlier_alpha: f64,
    pub seed: u64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self { h: None, n_starts: 50, max_c_steps: 30, outlier_alpha: 0.005, seed: 0 }
    }
}

impl RobustConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn subset_size(&self, m: usize) -> usize {
        self.h.unwrap_or(m / 2 + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustEstimates {
    pub mu_tilde: DVector<f64>,
    pub d_tilde: DVector<f64>,
    pub traces: TraceEstimates,
    pub outlier_flags: Vec<bool>,
    /// Rows used for the final estimates (the unflagged rows), ascending.
    pub subset_indices: Vec<usize>,
    /// The minimum-diagonal-product subset found by the search, ascending.
    pub mdp_subset: Vec<usize>,
    pub mdp_objective: f64,
}

impl RobustEstimates {
    pub fn params(&self) -> Result<ProcessParameters> {
        ProcessParameters::new(self.mu_tilde.clone(), self.d_tilde.clone(), self.traces.clone(), ParamSource::Robust)
    }

    pub fn n_flagged(&self) -> usize {
        self.outlier_flags.iter().filter(|&&f| f).count()
    }
}

/// Row-major copy for cache-friendly per-row distance sweeps.
struct Rows {
    p: usize,
    values: Vec<f64>,
}

impl Rows {
    fn new(data: &DataMatrix) -> Self {
        let x = data.matrix();
        let (m, p) = (x.nrows(), x.ncols());
        let mut values = Vec::with_capacity(m * p);
        for i in 0..m {
            values.extend(x.row(i).iter());
        }
        Self { p, values }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    fn len(&self) -> usize {
        self.values.len() / self.p
    }

    /// Mean and unbiased variance of each column over `subset`.
    fn moments(&self, subset: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = subset.len();
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        let mut mean = vec![0.0; self.p];
        let mut var = vec![0.0; self.p];
        for j in 0..self.p {
            let s: NeumaierSum = subset.iter().map(|&i| self.row(i)[j]).collect();
            let mu = s.value() / n as f64;
            let ss: NeumaierSum = subset
                .iter()
                .map(|&i| {
                    let e = self.row(i)[j] - mu;
                    e * e
                })
                .collect();
            let v = ss.value() / (n - 1) as f64;
            if !(v > 0.0) {
                return Err(Error::DegenerateSubset { column: j });
            }
            mean[j] = mu;
            var[j] = v;
        }
        Ok((mean, var))
    }

    fn distances(&self, mean: &[f64], var: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| chart::modified_distance_unchecked(self.row(i), mean, var))
            .collect()
    }
}

fn log_product(var: &[f64]) -> f64 {
    var.iter().map(|v| v.ln()).collect::<NeumaierSum>().value()
}

/// `Σ_j log s²_j` over the subset (log of the product of marginal variances).
pub fn diagonal_product_objective(data: &DataMatrix, subset: &[usize]) -> Result<f64> {
    check_indices(data, subset)?;
    let (_, var) = Rows::new(data).moments(subset)?;
    Ok(log_product(&var))
}

fn check_indices(data: &DataMatrix, subset: &[usize]) -> Result<()> {
    if let Some(&i) = subset.iter().find(|&&i| i >= data.nrows()) {
        return Err(Error::Dimension(format!("row index {i} out of range")));
    }
    Ok(())
}

/// Indices of the `h` smallest values, ties broken by ascending index; returned sorted.
fn h_smallest(dist: &[f64], h: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    let cmp = |&a: &usize, &b: &usize| dist[a].total_cmp(&dist[b]).then(a.cmp(&b));
    if h < idx.len() {
        idx.select_nth_unstable_by(h, cmp);
        idx.truncate(h);
    }
    idx.sort_unstable();
    idx
}

/// One concentration step: rows ranked by diagonal distance to the
/// subset's mean and variances; the `h` closest are returned (ascending).
pub fn concentration_step(data: &DataMatrix, subset: &[usize], h: usize) -> Result<Vec<usize>> {
    check_indices(data, subset)?;
    if h < 2 || h > data.nrows() {
        return Err(Error::Domain(format!("subset size {h} outside 2..={}", data.nrows())));
    }
    let rows = Rows::new(data);
    c_step(&rows, subset, h)
}

fn c_step(rows: &Rows, subset: &[usize], h: usize) -> Result<Vec<usize>> {
    let (mean, var) = rows.moments(subset)?;
    Ok(h_smallest(&rows.distances(&mean, &var), h))
}

/// Variance consistency factor for the `h_frac` most central fraction of
/// univariate normal data: `h_frac / F_{χ²₃}(χ²₁(h_frac))`.
pub fn trimming_consistency_factor(h_frac: f64) -> Result<f64> {
    trimming_consistency_factor_dim(h_frac, 1)
}

/// Same correction when rows are ranked by a `dim`-variate squared distance:
/// `h_frac / F_{χ²_{dim+2}}(χ²_{dim}(h_frac))`.
pub fn trimming_consistency_factor_dim(h_frac: f64, dim: usize) -> Result<f64> {
    if !(h_frac > 0.5 && h_frac <= 1.0) {
        return Err(Error::Domain(format!("h fraction must be in (0.5, 1], got {h_frac}")));
    }
    if dim == 0 {
        return Err(Error::Domain("dimension must be >= 1".into()));
    }
    if h_frac == 1.0 {
        return Ok(1.0);
    }
    let d = dim as f64;
    let q = ChiSquared::new(d).expect("positive dof").inverse_cdf(h_frac);
    let mass = ChiSquared::new(d + 2.0).expect("positive dof").cdf(q);
    Ok(h_frac / mass)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn draw_score(seed: u64, restart: u64, key: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(restart)) ^ key.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Runs one restart; returns `(objective, subset)`.
fn run_restart(rows: &Rows, keys: &[u64], cfg: &RobustConfig, h: usize, restart: usize) -> Option<(f64, Vec<usize>)> {
    let m = rows.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&i| (draw_score(cfg.seed, restart as u64, keys[i]), i));

    // Start from two keyed rows, adding more only if a column is constant on them.
    let mut start = 2;
    let mut subset = loop {
        let seed_rows: Vec<usize> = order[..start].to_vec();
        match c_step(rows, &seed_rows, h) {
            Ok(s) => break s,
            Err(_) if start < h => start += 1,
            Err(_) => return None,
        }
    };
    let mut objective = rows.moments(&subset).ok().map(|(_, v)| log_product(&v))?;
    for _ in 0..cfg.max_c_steps {
        let next = match c_step(rows, &subset, h) {
            Ok(s) => s,
            Err(_) => break,
        };
        if next == subset {
            break;
        }
        let next_obj = match rows.moments(&next) {
            Ok((_, v)) => log_product(&v),
            Err(_) => break,
        };
        subset = next;
        objective = next_obj;
    }
    Some((objective, subset))
}

/// Robust estimates with restart randomness keyed to row indices.
pub fn rmdp_estimate(data: &DataMatrix, cfg: &RobustConfig) -> Result<RobustEstimates> {
    let keys: Vec<u64> = (0..data.nrows() as u64).collect();
    rmdp_estimate_keyed(data, &keys, cfg)
}

/// Robust estimates where restart `r` seeds from the rows with the smallest
/// `hash(seed, r, keys[i])`. Permuting rows together with their keys permutes
/// the result.
pub fn rmdp_estimate_keyed(data: &DataMatrix, keys: &[u64], cfg: &RobustConfig) -> Result<RobustEstimates> {
    let m = data.nrows();
    let p = data.ncols();
    if keys.len() != m {
        return Err(Error::Dimension(format!("{} keys for {m} rows", keys.len())));
    }
    let h = cfg.subset_size(m);
    if h < 2 || h > m {
        return Err(Error::Domain(format!("subset size {h} outside 2..={m}")));
    }
    if cfg.n_starts == 0 {
        return Err(Error::Domain("n_starts must be >= 1".into()));
    }
    let rows = Rows::new(data);

    let candidates = map_indexed(cfg.n_starts, |r| run_restart(&rows, keys, cfg, h, r));
    let (objective, best) = candidates
        .into_iter()
        .flatten()
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .ok_or_else(|| Error::EstimationFailure("every restart hit a degenerate subset".into()))?;

    // Raw estimates from the best subset, with consistency rescaling.
    let (mean, mut var) = rows.moments(&best)?;
    let k = trimming_consistency_factor_dim(h as f64 / m as f64, p)
        .or_else(|_| if h == m { Ok(1.0) } else { trimming_consistency_factor_dim(0.5 + 1e-9, p) })?;
    var.iter_mut().for_each(|v| *v *= k);
    let subset_data = data.select_rows(&best)?;
    let raw_traces = match stats::sample_covariance(&subset_data)
        .and_then(|c| stats::correlation(&c))
        .and_then(|r| TraceEstimates::estimate(&r, h))
    {
        Ok(t) => t,
        // p large relative to h: fall back to all rows for the screening limit.
        Err(Error::IllConditioned { .. }) => {
            let r = stats::correlation(&stats::sample_covariance(data)?)?;
            TraceEstimates::estimate(&r, m)?
        }
        Err(e) => return Err(e),
    };
    let raw = ProcessParameters::new(DVector::from_vec(mean), DVector::from_vec(var), raw_traces, ParamSource::Robust)?;

    let screen = ChartConfig::new(cfg.outlier_alpha, CfOrder::First)?;
    let raw_ucl = screen.ucl(&raw.traces)?;
    let c = raw.correction(screen.apply_correction);
    let scale = c * (2.0 * raw.traces.tr2_hat).sqrt();
    let dist = rows.distances(raw.mu.as_slice(), raw.d_diag.as_slice());
    let outlier_flags: Vec<bool> = dist
        .iter()
        .map(|&m2| {
            let u = (m2 - p as f64) / scale;
            chart::chart_decision(u, &raw, &screen).map(|(_, s, _)| s).unwrap_or(raw_ucl < u)
        })
        .collect();

    let clean: Vec<usize> = (0..m).filter(|&i| !outlier_flags[i]).collect();
    if clean.len() < 2 {
        return Err(Error::EstimationFailure(format!("{} of {m} rows flagged", m - clean.len())));
    }
    let clean_data = data.select_rows(&clean)?;
    let cov = stats::sample_covariance(&clean_data)?;
    let r = stats::correlation(&cov)?;
    let traces = TraceEstimates::estimate(&r, clean.len())?;
    Ok(RobustEstimates {
        mu_tilde: stats::sample_mean(&clean_data),
        d_tilde: cov.d_s,
        traces,
        outlier_flags,
        subset_indices: clean,
        mdp_subset: best,
        mdp_objective: objective,
    })
}
