use diagchart::chart::{self, CfOrder, ChartConfig, ParamSource, ProcessParameters};
use diagchart::cornish_fisher as cf;
use diagchart::io::{self, CleaningThresholds, RankConvention, RawTable, TransformModel};
use diagchart::robust::{self, RobustConfig};
use diagchart::selfstart::{PhaseOne, SelfStartState};
use diagchart::stats::{self, DataMatrix, TraceEstimates};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-100.0f64..100.0, cols), rows)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn streaming_equals_batch(rows in matrix(40, 4), seed_rows in 2usize..6) {
        let all = DataMatrix::from_rows(&rows).unwrap();
        let seed = all.select_rows(&(0..seed_rows).collect::<Vec<_>>()).unwrap();
        let Ok(mut state) = SelfStartState::init(&seed, &PhaseOne::Classical, ChartConfig::new(0.01, CfOrder::First).unwrap()) else {
            return Ok(());
        };
        for i in seed_rows..rows.len() {
            state.update(&all.row(i)).unwrap();
        }
        let batch = stats::sample_covariance(&all).unwrap();
        let s = state.covariance().unwrap();
        let mean = stats::sample_mean(&all);
        for r in 0..4 {
            prop_assert!(rel_close(state.xbar()[r], mean[r], 1e-10));
            for c in 0..4 {
                prop_assert!(rel_close(s[(r, c)], batch.s[(r, c)], 1e-10));
                prop_assert_eq!(s[(r, c)], s[(c, r)]);
            }
        }
    }

    #[test]
    fn trace_estimates_invariant_to_variable_order(rows in matrix(30, 6), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let x = DataMatrix::from_rows(&rows).unwrap();
        let y = DataMatrix::new(x.matrix().select_columns(&perm)).unwrap();
        let r1 = stats::correlation(&stats::sample_covariance(&x).unwrap()).unwrap();
        let r2 = stats::correlation(&stats::sample_covariance(&y).unwrap()).unwrap();
        let (a, b) = (stats::symmetric_traces(&r1).unwrap(), stats::symmetric_traces(&r2).unwrap());
        prop_assert!(rel_close(a.0, b.0, 1e-10) && rel_close(a.1, b.1, 1e-10) && rel_close(a.2, b.2, 1e-10));
    }

    #[test]
    fn distance_is_scale_invariant(x in prop::collection::vec(-5.0f64..5.0, 8), scale in prop::collection::vec(0.1f64..10.0, 8)) {
        let p = 8;
        let mu = DVector::from_fn(p, |i, _| i as f64 * 0.1);
        let d = DVector::from_fn(p, |i, _| 1.0 + i as f64);
        let traces = TraceEstimates::known(&DMatrix::identity(p, p)).unwrap();
        let a = ProcessParameters::new(mu.clone(), d.clone(), traces.clone(), ParamSource::Known).unwrap();
        let s = DVector::from_vec(scale);
        let b = ProcessParameters::new(mu.component_mul(&s), d.component_mul(&s).component_mul(&s), traces, ParamSource::Known).unwrap();
        let x = DVector::from_vec(x);
        let m_a = chart::modified_distance(&x, &a).unwrap();
        let m_b = chart::modified_distance(&x.component_mul(&s), &b).unwrap();
        prop_assert!(m_a >= 0.0);
        prop_assert!(rel_close(m_a, m_b, 1e-12));
    }

    #[test]
    fn signal_iff_u_exceeds_ucl(m2 in 0.0f64..400.0, alpha in 0.001f64..0.4) {
        let p = 50;
        let params = ProcessParameters::known(DVector::zeros(p), &stats::ar1_correlation(p, 0.5)).unwrap();
        let cfg = ChartConfig::new(alpha, CfOrder::First).unwrap();
        let u = chart::u_statistic(m2, &params, true).unwrap();
        let (z, signal, ucl) = chart::chart_decision(u, &params, &cfg).unwrap();
        prop_assert_eq!(signal, z > cfg.z_alpha());
        prop_assert_eq!(signal, u > ucl);
    }

    #[test]
    fn cf_quantile_monotone_in_alpha(a in 0.001f64..0.2, b in 0.001f64..0.2, tr2 in 1.0f64..500.0, ratio in 0.5f64..5.0) {
        let tr3 = tr2 * ratio;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(cf::cf_quantile_first_order(tr2, tr3, lo).unwrap() >= cf::cf_quantile_first_order(tr2, tr3, hi).unwrap());
    }

    #[test]
    fn hermite_recursion(x in -5.0f64..5.0) {
        for k in 1..6u32 {
            let lhs = cf::hermite(k + 1, x).unwrap();
            let rhs = x * cf::hermite(k, x).unwrap() - k as f64 * cf::hermite(k - 1, x).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn transform_is_monotone(reference in prop::collection::vec(-50.0f64..50.0, 1..60), a in -80.0f64..80.0, b in -80.0f64..80.0) {
        let r = DataMatrix::from_rows(&reference.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap();
        for conv in [RankConvention::Weibull, RankConvention::Hazen] {
            let t = TransformModel::fit(&r, conv);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (tl, th) = (t.transform_value(0, lo), t.transform_value(0, hi));
            prop_assert!(tl.is_finite() && th.is_finite());
            prop_assert!(tl <= th);
        }
    }

    #[test]
    fn cleaning_is_idempotent(cells in prop::collection::vec(prop::collection::vec(prop::option::weighted(0.9, -10.0f64..10.0), 6), 8..30), constant in 0usize..6) {
        let mut rows = cells;
        for r in rows.iter_mut() {
            r[constant] = Some(1.0);
        }
        let headers: Vec<String> = (0..6).map(|j| format!("c{j}")).collect();
        let t = RawTable { headers, rows };
        let th = CleaningThresholds { missing: 0.2, variance: 1e-6 };
        let Ok((h, d, rep)) = io::clean(&t, th) else { return Ok(()); };
        let name = format!("c{}", constant);
        prop_assert!(rep.dropped_near_constant.contains(&name));
        prop_assert_eq!(rep.cols_out, rep.cols_in - rep.dropped_missing.len() - rep.dropped_near_constant.len());
        let again = RawTable {
            headers: h.clone(),
            rows: (0..d.nrows()).map(|i| d.matrix().row(i).iter().map(|v| Some(*v)).collect()).collect(),
        };
        let (h2, d2, rep2) = io::clean(&again, th).unwrap();
        prop_assert_eq!(h2, h);
        prop_assert_eq!(d2, d);
        prop_assert!(rep2.dropped_missing.is_empty() && rep2.dropped_near_constant.is_empty());
    }

    #[test]
    fn ecdf_columns_are_nondecreasing(a in prop::collection::vec(-3.0f64..3.0, 1..40), b in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let rows = io::ecdf_comparison(&a, &b).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[0].value < w[1].value);
            prop_assert!(w[0].ecdf_a <= w[1].ecdf_a && w[0].ecdf_b <= w[1].ecdf_b && w[0].normal_cdf <= w[1].normal_cdf);
        }
        let last = rows.last().unwrap();
        prop_assert_eq!((last.ecdf_a, last.ecdf_b), (1.0, 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rmdp_invariant_to_row_order(perm in Just((0..40).collect::<Vec<usize>>()).prop_shuffle(), seed in 0u64..1000) {
        let mut rng = diagchart::parallel::substream(seed, 0);
        let s = diagchart::simulation::Scenario::identity(5);
        let x = DataMatrix::new(s.sample_matrix(&mut rng, 40)).unwrap();
        let y = x.select_rows(&perm).unwrap();
        let cfg = RobustConfig { n_starts: 10, ..RobustConfig::with_seed(seed) };
        let keys: Vec<u64> = (0..40).collect();
        let permuted_keys: Vec<u64> = perm.iter().map(|&i| i as u64).collect();
        let a = robust::rmdp_estimate_keyed(&x, &keys, &cfg).unwrap();
        let b = robust::rmdp_estimate_keyed(&y, &permuted_keys, &cfg).unwrap();
        let mapped: Vec<usize> = {
            let mut v: Vec<usize> = b.subset_indices.iter().map(|&i| perm[i]).collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(mapped, a.subset_indices.clone());
        for j in 0..5 {
            prop_assert!(rel_close(a.mu_tilde[j], b.mu_tilde[j], 1e-12));
            prop_assert!(rel_close(a.d_tilde[j], b.d_tilde[j], 1e-12));
        }
    }
}
