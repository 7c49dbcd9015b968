//! Quantile machinery for the standardized distance statistic.
//!
//! Under normality the statistic `U = (Σ λ_j ξ_j² − p) / √(2 tr ρ²)` is a
//! standardized weighted sum of χ²₁ variables. Its upper quantile is
//! approximated by a Cornish–Fisher expansion in the standardized cumulants
//! `κ₃ = 8 tr ρ³ / (2 tr ρ²)^{3/2}` and `κ₄ = 12 tr ρ⁴ / (tr ρ²)²`.

use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::parallel::{map_indexed, substream};

/// Probabilists' Hermite polynomial `H_k(x)`, `0 ≤ k ≤ 6`.
pub fn hermite(k: u32, x: f64) -> Result<f64> {
    if k > 6 {
        return Err(Error::Domain(format!("hermite order {k} outside 0..=6")));
    }
    let k = k as i32;
    let mut acc = 0.0;
    for i in 0..=(k / 2) {
        // (2i)! / (2^i i!) = (2i-1)!!
        let double_fact: f64 = (1..=i).map(|t| (2 * t - 1) as f64).product();
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * double_fact * binomial(k, 2 * i) * x.powi(k - 2 * i);
    }
    Ok(acc)
}

fn binomial(n: i32, k: i32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// General expansion through the `γ₂` and `γ₁²` terms:
/// `z + γ₁ H₂/6 + γ₂ H₃/24 − γ₁² (2H₃ + H₁)/36`.
pub fn cf_general(z_alpha: f64, gamma1: f64, gamma2: f64) -> f64 {
    let z = z_alpha;
    let h1 = z;
    let h2 = z * z - 1.0;
    let h3 = z * z * z - 3.0 * z;
    z + gamma1 * h2 / 6.0 + gamma2 * h3 / 24.0 - gamma1 * gamma1 * (2.0 * h3 + h1) / 36.0
}

fn check_tr2(tr2: f64) -> Result<()> {
    if tr2 > 0.0 && tr2.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("tr(rho^2) must be positive, got {tr2}")))
    }
}

pub fn kappa3(tr2: f64, tr3: f64) -> Result<f64> {
    check_tr2(tr2)?;
    Ok(8.0 * tr3 / (2.0 * tr2).powf(1.5))
}

pub fn kappa4(tr2: f64, tr4: f64) -> Result<f64> {
    check_tr2(tr2)?;
    Ok(12.0 * tr4 / (tr2 * tr2))
}

/// Standardized third and fourth cumulants of the distance statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulantSet {
    pub kappa3: f64,
    pub kappa4: f64,
}

impl CumulantSet {
    pub fn from_traces(tr2: f64, tr3: f64, tr4: f64) -> Result<Self> {
        Ok(Self { kappa3: kappa3(tr2, tr3)?, kappa4: kappa4(tr2, tr4)? })
    }
}

/// Sums of eigenvalue products over pairwise-distinct ordered indices,
/// written through `p = Σλ` and the traces `tr ρ^k = Σλ^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedPowerSums {
    /// `Σ_{i≠j} λ_i λ_j`
    pub pair: f64,
    /// `Σ_{i≠j} λ_i² λ_j`
    pub square_linear: f64,
    /// `Σ_{i≠j≠k} λ_i λ_j λ_k`
    pub triple: f64,
    /// `Σ_{i≠j} λ_i³ λ_j`
    pub cube_linear: f64,
    /// `Σ_{i≠j} λ_i² λ_j²`
    pub square_square: f64,
    /// `Σ_{i≠j≠k} λ_i² λ_j λ_k`
    pub square_linear_linear: f64,
    /// `Σ_{i≠j≠k≠l} λ_i λ_j λ_k λ_l`
    pub quadruple: f64,
}

impl MixedPowerSums {
    pub fn from_traces(p: f64, tr2: f64, tr3: f64, tr4: f64) -> Self {
        Self {
            pair: p * p - tr2,
            square_linear: p * tr2 - tr3,
            triple: p.powi(3) + 2.0 * tr3 - 3.0 * p * tr2,
            cube_linear: p * tr3 - tr4,
            square_square: tr2 * tr2 - tr4,
            square_linear_linear: p * p * tr2 - tr2 * tr2 - 2.0 * p * tr3 + 2.0 * tr4,
            quadruple: p.powi(4) - 6.0 * tr4 + 8.0 * p * tr3 + 3.0 * tr2 * tr2 - 6.0 * p * p * tr2,
        }
    }

    /// Standardized third and fourth cumulants of `Σλ_j ξ_j²` assembled from
    /// raw moments (`E ξ⁴ = 3`, `E ξ⁶ = 15`, `E ξ⁸ = 105`). Agrees with
    /// [`CumulantSet::from_traces`] when the identities hold.
    pub fn cumulants(&self, p: f64, tr2: f64, tr3: f64, tr4: f64) -> Result<CumulantSet> {
        check_tr2(tr2)?;
        let m1 = p;
        let m2 = 3.0 * tr2 + self.pair;
        let m3 = 15.0 * tr3 + 9.0 * self.square_linear + self.triple;
        let m4 = 105.0 * tr4
            + 60.0 * self.cube_linear
            + 27.0 * self.square_square
            + 18.0 * self.square_linear_linear
            + self.quadruple;
        let c3 = m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3);
        let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
        let var = 2.0 * tr2;
        Ok(CumulantSet { kappa3: c3 / var.powf(1.5), kappa4: (c4 - 3.0 * var * var) / (var * var) })
    }
}

fn check_alpha_half(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 0.5 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must be in (0, 0.5), got {alpha}")))
    }
}

/// Skewness shift added to `z_α` by the first-order expansion.
pub fn skew_shift(tr2: f64, tr3: f64, z_alpha: f64) -> f64 {
    4.0 * tr3 * (z_alpha * z_alpha - 1.0) / (3.0 * (2.0 * tr2).powf(1.5))
}

pub fn cf_quantile_first_order(tr2: f64, tr3: f64, alpha: f64) -> Result<f64> {
    check_alpha_half(alpha)?;
    check_tr2(tr2)?;
    let z = normal_quantile(alpha)?;
    Ok(z + skew_shift(tr2, tr3, z))
}

pub fn cf_quantile_second_order(tr2: f64, tr3: f64, tr4: f64, alpha: f64) -> Result<f64> {
    check_alpha_half(alpha)?;
    check_tr2(tr2)?;
    if !(tr4 >= 0.0) {
        return Err(Error::Domain(format!("tr(rho^4) must be >= 0, got {tr4}")));
    }
    let z = normal_quantile(alpha)?;
    let z3 = z * z * z;
    Ok(z + skew_shift(tr2, tr3, z) + tr4 * (z3 - 3.0 * z) / (2.0 * tr2 * tr2)
        + 2.0 * tr3 * tr3 * (5.0 * z - 2.0 * z3) / (9.0 * tr2.powi(3)))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper-α standard normal quantile `Φ⁻¹(1 − α)`.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(-lower_normal_quantile(alpha))
}

/// `Φ⁻¹(q)`: Acklam's rational approximation refined by one Halley step.
pub fn lower_normal_quantile(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.024_25;

    let x = if q < LOW {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else if q <= 1.0 - LOW {
        let t = q - 0.5;
        let r = t * t;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * t
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let t = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    };
    let e = normal_cdf(x) - q;
    let u = e / normal_pdf(x);
    x - u / (1.0 + x * u / 2.0)
}

/// Eigenvalues of a correlation matrix. Oracle-side type: the chart itself
/// never decomposes ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSpectrum {
    lambdas: Vec<f64>,
}

impl EigenSpectrum {
    /// Accepts any non-negative spectrum and rescales it so `Σλ = p`.
    pub fn normalized(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::Dimension("empty spectrum".into()));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Domain("eigenvalues must be finite and non-negative".into()));
        }
        let total: f64 = lambdas.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Domain("spectrum sums to zero".into()));
        }
        let scale = lambdas.len() as f64 / total;
        Ok(Self { lambdas: lambdas.into_iter().map(|l| l * scale).collect() })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn p(&self) -> usize {
        self.lambdas.len()
    }

    pub fn power_sum(&self, k: i32) -> f64 {
        crate::sum::sum(self.lambdas.iter().map(|l| l.powi(k)))
    }
}

const ORACLE_CHUNK: usize = 8192;

/// Simulated standardized draws `(Σλ_j ξ_j² − p) / √(2Σλ_j²)`.
///
/// Chunk `c` uses substream `c` of `seed`, so output is identical for any
/// worker count.
pub fn weighted_chisq_draws(spectrum: &EigenSpectrum, n_draws: usize, seed: u64) -> Vec<f64> {
    let lambdas = spectrum.lambdas();
    let p = spectrum.p() as f64;
    let scale = (2.0 * spectrum.power_sum(2)).sqrt();
    let n_chunks = n_draws.div_ceil(ORACLE_CHUNK);
    let chunks = map_indexed(n_chunks, |c| {
        let mut rng = substream(seed, c as u64);
        let len = ORACLE_CHUNK.min(n_draws - c * ORACLE_CHUNK);
        (0..len)
            .map(|_| {
                let s: f64 = lambdas
                    .iter()
                    .map(|l| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        l * x * x
                    })
                    .sum();
                (s - p) / scale
            })
            .collect::<Vec<f64>>()
    });
    chunks.into_iter().flatten().collect()
}

/// Empirical upper-α quantile of the standardized weighted χ² statistic.
pub fn weighted_chisq_quantile_oracle(
    spectrum: &EigenSpectrum,
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<f64> {
    if n_draws < 100_000 {
        return Err(Error::Domain(format!("oracle needs at least 1e5 draws, got {n_draws}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let mut draws = weighted_chisq_draws(spectrum, n_draws, seed);
    Ok(upper_quantile(&mut draws, alpha))
}

/// Order statistic at rank `⌈(1 − α) n⌉`.
pub(crate) fn upper_quantile(xs: &mut [f64], alpha: f64) -> f64 {
    let n = xs.len();
    let rank = (((1.0 - alpha) * n as f64).ceil() as usize).clamp(1, n);
    let (_, v, _) = xs.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mixed_sums_reproduce_closed_form_cumulants() {
        for (p, tr2, tr3, tr4) in [(4.0, 4.0, 4.0, 4.0), (10.0, 17.3, 41.2, 120.5)] {
            let mixed = MixedPowerSums::from_traces(p, tr2, tr3, tr4).cumulants(p, tr2, tr3, tr4).unwrap();
            let closed = CumulantSet::from_traces(tr2, tr3, tr4).unwrap();
            assert_relative_eq!(mixed.kappa3, closed.kappa3, max_relative = 1e-10);
            assert_relative_eq!(mixed.kappa4, closed.kappa4, max_relative = 1e-10);
        }
    }

    #[test]
    fn hermite_examples() {
        assert_eq!(hermite(0, 1.7).unwrap(), 1.0);
        assert_eq!(hermite(1, 3.7).unwrap(), 3.7);
        assert_eq!(hermite(2, 2.0).unwrap(), 3.0);
        assert_eq!(hermite(3, 2.0).unwrap(), 2.0);
        // H4 = x^4 - 6x^2 + 3, H6 = x^6 - 15x^4 + 45x^2 - 15
        assert_relative_eq!(hermite(4, 1.5).unwrap(), 1.5f64.powi(4) - 6.0 * 2.25 + 3.0);
        let x: f64 = 0.7;
        assert_relative_eq!(
            hermite(6, x).unwrap(),
            x.powi(6) - 15.0 * x.powi(4) + 45.0 * x * x - 15.0,
            epsilon = 1e-14
        );
        assert!(matches!(hermite(7, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cf_general_examples() {
        assert_eq!(cf_general(1.2345, 0.0, 0.0), 1.2345);
        // 2 + 0.3·3/6 − 0.09·(2·2 + 2)/36
        assert_relative_eq!(cf_general(2.0, 0.3, 0.0), 2.135, epsilon = 1e-14);
    }

    #[test]
    fn kappa_examples() {
        assert_relative_eq!(kappa3(8.0, 8.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(kappa3(5.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(kappa3(4.0, 8.0).unwrap(), 2.0 * 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(kappa4(12.0, 12.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(kappa4(3.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(kappa4(4.0, 16.0).unwrap(), 12.0, epsilon = 1e-14);
        assert!(kappa3(0.0, 1.0).is_err());
        assert!(kappa4(-1.0, 1.0).is_err());
    }

    #[test]
    fn first_order_examples() {
        let z = normal_quantile(0.005).unwrap();
        assert_eq!(cf_quantile_first_order(10.0, 0.0, 0.005).unwrap(), z);
        let w = cf_quantile_first_order(10.0, 10.0, 0.005).unwrap();
        assert_relative_eq!(w, z + 40.0 * (z * z - 1.0) / (3.0 * 20f64.powf(1.5)), epsilon = 1e-14);
        assert!((w - 3.416).abs() < 1e-3);
        let p = 1e5;
        assert!(cf_quantile_first_order(p, p, 0.005).unwrap() - z < 0.01);
        assert!(cf_quantile_first_order(10.0, 10.0, 0.5).is_err());
        assert!(cf_quantile_first_order(10.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn second_order_reduces_without_higher_cumulants() {
        let z = normal_quantile(0.01).unwrap();
        assert_eq!(cf_quantile_second_order(7.0, 0.0, 0.0, 0.01).unwrap(), z);
        assert!(cf_quantile_second_order(7.0, 1.0, -1.0, 0.01).is_err());
    }

    #[test]
    fn normal_quantile_examples() {
        let z = normal_quantile(0.005).unwrap();
        assert!((z - 2.5758).abs() < 1e-4);
        assert!((z - 2.575).abs() < 1e-3);
        assert!(normal_quantile(0.5).unwrap().abs() < 1e-15);
        assert!((normal_quantile(0.0027).unwrap() - 2.7822).abs() < 1e-4);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        for &a in &[1e-12, 1e-6, 0.001, 0.0027, 0.01, 0.02425, 0.1, 0.3, 0.5, 0.77, 0.99] {
            let z = normal_quantile(a).unwrap();
            assert_relative_eq!(1.0 - normal_cdf(z), a, max_relative = 1e-9);
        }
    }

    #[test]
    fn oracle_rejects_small_draw_counts() {
        let s = EigenSpectrum::normalized(vec![1.0; 3]).unwrap();
        assert!(weighted_chisq_quantile_oracle(&s, 0.05, 1000, 1).is_err());
    }

    #[test]
    fn spectrum_is_normalized_to_dimension() {
        let s = EigenSpectrum::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(s.lambdas(), &[0.5, 1.5]);
        assert!(EigenSpectrum::normalized(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn upper_quantile_rank_convention() {
        let mut xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(upper_quantile(&mut xs, 0.05), 95.0);
    }
}
