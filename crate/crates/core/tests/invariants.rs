use missbench_core::bench::{quantile, BoxStats};
use missbench_core::gbrt::{fit_gbrt, predict_row, GbrtConfig};
use missbench_core::imputers::{concat_mask, fit_iterative, fit_mean, transform, RidgePenalty};
use missbench_core::linalg::{condition_mcar, jacobi_eigen, GaussianModel, SymPsdMatrix};
use missbench_core::neumiss::{neumiss_impute, NeuMissParams};
use missbench_core::nn::r2_score;
use missbench_core::oracles::{bayes_predict, chained_oracle_predict, OracleContext};
use missbench_core::rng::seeded;
use missbench_core::synth::{CorrLevel, DataSpec, FstarKind, MaskedDataset, MechanismKind, SyntheticProblem};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_model(d: usize, seed: u64) -> GaussianModel {
    let mut rng = seeded(seed);
    let b = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
    let sigma = b.dot(&b.t()) + Array2::<f64>::eye(d) * 0.1;
    let mu: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    GaussianModel::new(mu, SymPsdMatrix::new(sigma).unwrap()).unwrap()
}

fn pattern_and_values() -> impl Strategy<Value = (u64, Vec<bool>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|d| {
        (
            any::<u64>(),
            proptest::collection::vec(any::<bool>(), d),
            proptest::collection::vec(-3.0f64..3.0, d),
        )
    })
}

fn small_dataset(seed: u64, n: usize, d: usize, rate: f64) -> MaskedDataset {
    let mut rng = seeded(seed);
    let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut mask = Array2::from_shape_fn((n, d), |_| rng.random_bool(rate));
    // every feature observed at least twice
    for j in 0..d {
        mask[[0, j]] = false;
        mask[[1, j]] = false;
    }
    let y = x.column(0).to_owned();
    MaskedDataset::new(x, mask, y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conditional_covariance_is_psd_and_no_larger((seed, pattern, x) in pattern_and_values()) {
        let d = pattern.len();
        let model = random_model(d, seed);
        let x_obs: Vec<f64> = x.iter().zip(&pattern).filter(|(_, &m)| !m).map(|(v, _)| *v).collect();
        let cond = condition_mcar(&model, &pattern, &x_obs).unwrap();
        let mis = cond.missing_indices();
        prop_assert_eq!(cond.mu_c.len(), mis.len());
        let sc = cond.sigma_c.as_array();
        if !mis.is_empty() {
            let (eig, _) = jacobi_eigen(sc);
            prop_assert!(eig.iter().all(|&e| e > -1e-9));
        }
        for (a, &j) in mis.iter().enumerate() {
            prop_assert!(sc[[a, a]] <= model.sigma().get(j, j) + 1e-9);
        }
    }

    #[test]
    fn bowl_bayes_dominates_chained_and_linear_matches((seed, pattern, _x) in pattern_and_values(), gsm in any::<bool>()) {
        let d = pattern.len();
        let mech = if gsm { MechanismKind::Gsm } else { MechanismKind::Mcar };
        let mut rng = seeded(seed);
        for (kind, exact) in [(FstarKind::Bowl, false), (FstarKind::Linear, true)] {
            let ctx = OracleContext::from_spec(&DataSpec::new(d, CorrLevel::Low, kind, mech, seed % 1000)).unwrap();
            let x = missbench_core::linalg::sample_gaussian(&ctx.model, 1, &mut rng).unwrap();
            let x_obs: Vec<f64> = (0..d).filter(|&j| !pattern[j]).map(|j| x[[0, j]]).collect();
            let gap = bayes_predict(&ctx, &x_obs, &pattern).unwrap() - chained_oracle_predict(&ctx, &x_obs, &pattern).unwrap();
            if exact {
                prop_assert!(gap.abs() < 1e-10);
            } else {
                prop_assert!(gap >= -1e-12);
            }
        }
    }

    #[test]
    fn r2_is_at_most_one(y in proptest::collection::vec(-10.0f64..10.0, 2..40), noise in proptest::collection::vec(-1.0f64..1.0, 40)) {
        let y = Array1::from(y);
        prop_assume!(y.iter().any(|&v| (v - y[0]).abs() > 1e-6));
        let pred: Array1<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
        prop_assert!(r2_score(&y, &pred).unwrap() <= 1.0);
        prop_assert!((r2_score(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        let mean = Array1::from_elem(y.len(), y.mean().unwrap());
        prop_assert!(r2_score(&y, &mean).unwrap().abs() < 1e-9);
    }

    #[test]
    fn box_stats_are_ordered(v in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
        let b = BoxStats::from_values(&v).unwrap();
        prop_assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max);
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        prop_assert_eq!(quantile(&s, 0.0), s[0]);
        prop_assert_eq!(quantile(&s, 1.0), s[s.len() - 1]);
    }

    #[test]
    fn imputers_keep_observed_entries(seed in any::<u64>(), rate in 0.05f64..0.6) {
        let data = small_dataset(seed, 40, 3, rate);
        for imp in [fit_mean(&data).unwrap(), fit_iterative(&data, RidgePenalty::default(), 3).unwrap()] {
            let out = transform(&imp, &data).unwrap();
            prop_assert!(out.iter().all(|v| v.is_finite()));
            for i in 0..data.n() {
                for j in 0..data.d() {
                    if let Some(v) = data.get(i, j) {
                        prop_assert_eq!(out[[i, j]], v);
                    }
                }
            }
            let with_mask = concat_mask(&out, data.mask()).unwrap();
            prop_assert_eq!(with_mask.ncols(), 2 * data.d());
        }
    }

    #[test]
    fn neumiss_passes_observed_through(seed in any::<u64>(), depth in 0usize..6, pattern in proptest::collection::vec(any::<bool>(), 4)) {
        let mut rng = seeded(seed);
        let mut normal = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal));
        let p = NeuMissParams { mu: normal(1, 4), w: normal(4, 4) * 0.3, w_mix: normal(4, 4), c: normal(1, 1), depth };
        let x = normal(1, 4).row(0).to_owned();
        let out = neumiss_impute(&p, x.view(), &pattern);
        for j in 0..4 {
            prop_assert!(out[j].is_finite());
            if !pattern[j] {
                prop_assert_eq!(out[j], x[j]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gbrt_predicts_within_target_range(seed in any::<u64>()) {
        let data = small_dataset(seed, 120, 3, 0.3);
        let cfg = GbrtConfig { n_trees: 15, min_leaf: 5, ..GbrtConfig::default() };
        let model = fit_gbrt(&data, &cfg).unwrap();
        let (lo, hi) = data.y().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        for row in [vec![None, None, None], vec![Some(0.0), None, Some(1.0)], vec![Some(5.0), Some(-5.0), Some(0.0)]] {
            let p = predict_row(&model, &row);
            prop_assert!(p >= lo - span && p <= hi + span);
        }
    }

    #[test]
    fn splits_are_reproducible_and_disjoint(seed in 0u64..1000) {
        let spec = DataSpec::new(4, CorrLevel::High, FstarKind::Wave, MechanismKind::Gsm, seed);
        let a = SyntheticProblem::generate(&spec, 50, 20, 20).unwrap();
        let b = SyntheticProblem::generate(&spec, 50, 20, 20).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.test, &b.test);
        for t in a.test.ground_truth().rows() {
            prop_assert!(a.train.ground_truth().rows().into_iter().all(|r| r != t));
        }
    }
}
