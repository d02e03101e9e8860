mod support;

use missbench_core::gbrt::{fit_gbrt, predict_gbrt, GbrtConfig};
use missbench_core::rng::seeded;
use missbench_core::synth::MaskedDataset;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use support::gbrt_reference::fit_reference;

fn instance(n: usize, d: usize, seed: u64, levels: Option<f64>) -> MaskedDataset {
    let mut rng = seeded(seed);
    let x = Array2::from_shape_fn((n, d), |_| {
        let v: f64 = rng.sample(StandardNormal);
        levels.map_or(v, |s| (v * s).round() / s)
    });
    let mask = Array2::from_shape_fn((n, d), |_| rng.random_bool(0.3));
    let y: Array1<f64> = (0..n)
        .map(|i| {
            let a = if mask[[i, 0]] { 1.5 } else { x[[i, 0]] };
            a * a - x[[i, 1]] + 0.3 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    MaskedDataset::new(x, mask, y).unwrap()
}

fn max_gap(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn histogram_matches_exhaustive_when_bins_cover_all_values() {
    let cfg = GbrtConfig { n_trees: 10, max_depth: Some(2), max_leaf_nodes: None, n_bins: 1024, ..GbrtConfig::default() };
    for seed in 0..3 {
        let train = instance(500, 4, seed, None);
        let test = instance(300, 4, seed + 100, None);
        let hist = fit_gbrt(&train, &cfg).unwrap();
        let brute = fit_reference(&train, &cfg);
        assert!(max_gap(&predict_gbrt(&hist, &train), &predict_gbrt(&brute, &train)) < 1e-9);
        assert!(max_gap(&predict_gbrt(&hist, &test), &predict_gbrt(&brute, &test)) < 1e-9);
    }
}

#[test]
fn default_bins_match_exhaustive_on_coarse_values() {
    // at most 256 distinct values per feature, so the default bins are exact
    let cfg = GbrtConfig { n_trees: 10, max_depth: Some(2), max_leaf_nodes: None, ..GbrtConfig::default() };
    let train = instance(500, 4, 7, Some(20.0));
    let test = instance(300, 4, 8, None);
    let hist = fit_gbrt(&train, &cfg).unwrap();
    let brute = fit_reference(&train, &cfg);
    assert!(max_gap(&predict_gbrt(&hist, &test), &predict_gbrt(&brute, &test)) < 1e-9);
}

#[test]
fn best_first_growth_matches_exhaustive() {
    let cfg = GbrtConfig { n_trees: 5, max_leaf_nodes: Some(8), min_leaf: 10, n_bins: 1024, ..GbrtConfig::default() };
    let train = instance(500, 3, 11, None);
    let hist = fit_gbrt(&train, &cfg).unwrap();
    let brute = fit_reference(&train, &cfg);
    assert_eq!(hist.trees.iter().map(|t| t.n_leaves()).collect::<Vec<_>>(), brute.trees.iter().map(|t| t.n_leaves()).collect::<Vec<_>>());
    assert!(max_gap(&predict_gbrt(&hist, &train), &predict_gbrt(&brute, &train)) < 1e-9);
}

#[test]
fn fitting_is_deterministic() {
    let train = instance(400, 3, 21, None);
    let a = fit_gbrt(&train, &GbrtConfig::default()).unwrap();
    let b = fit_gbrt(&train, &GbrtConfig::default()).unwrap();
    assert_eq!(a, b);
}
