use missbench_core::bench::{
    read_results_csv, run_cell, run_experiment, summarize, ExperimentConfig, Method, CSV_COLUMNS,
};
use missbench_core::gbrt::GbrtConfig;
use missbench_core::neumiss::NeuMissOptions;
use missbench_core::nn::TrainConfig;
use missbench_core::synth::{CorrLevel, FstarKind, MechanismKind, SyntheticProblem};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        d: 4,
        corr_levels: vec![CorrLevel::High],
        fstars: vec![FstarKind::Bowl],
        mechanisms: vec![MechanismKind::Gsm],
        n_train: 500,
        n_val: 150,
        n_test: 150,
        seeds: vec![0, 1, 2],
        mlp_hidden: vec![0, 1],
        train: TrainConfig { max_epochs: 5, ..TrainConfig::default() },
        gbrt: GbrtConfig { n_trees: 10, ..GbrtConfig::default() },
        neumiss: NeuMissOptions { depths: vec![2], ..NeuMissOptions::default() },
        ..ExperimentConfig::default()
    }
}

#[test]
fn every_method_runs_on_shared_data() {
    let cfg = small();
    let s = cfg.settings()[0];
    let recs: Vec<_> = Method::ALL.iter().map(|&m| run_cell(&cfg, s, m, 4).unwrap()).collect();
    let r2_bayes = recs[0].r2_bayes.unwrap();
    for r in &recs {
        assert!(r.is_ok(), "{r:?}");
        assert_eq!(r.r2_bayes, Some(r2_bayes), "{} saw different test rows", r.method);
        assert!(r.r2.unwrap() <= 1.0);
        assert_eq!(r.delta.unwrap(), r.r2.unwrap() - r2_bayes);
    }
    assert_eq!(recs[0].delta, Some(0.0));
    let spec = cfg.data_spec(&s, 4);
    let a = SyntheticProblem::generate(&spec, cfg.n_train, cfg.n_val, cfg.n_test).unwrap();
    let b = SyntheticProblem::generate(&spec, cfg.n_train, cfg.n_val, cfg.n_test).unwrap();
    assert_eq!(a.test, b.test);
}

#[test]
fn experiment_outputs_and_recomputed_medians() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::Bayes, Method::ChainedOracle, Method::MeanMlp, Method::Gbrt],
        out_dir: dir.path().to_path_buf(),
        ..small()
    };
    let out = run_experiment(&cfg, 2, &|_| {}).unwrap();
    assert_eq!(out.records.len(), 12);
    assert_eq!(out.svgs.len(), 1);
    assert!(dir.path().join("summary.txt").exists());
    assert!(dir.path().join("run_metadata.json").exists());

    let text = std::fs::read_to_string(&out.results_csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let back = read_results_csv(&out.results_csv).unwrap();
    assert_eq!(back.len(), out.records.len());
    for (a, b) in back.iter().zip(&out.records) {
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.method, b.method);
    }

    // medians straight from the CSV text
    let summary = summarize(&back);
    for m in &cfg.methods {
        let mut deltas: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|f| f[0] == m.as_str())
            .map(|f| f[7].parse().unwrap())
            .collect();
        deltas.sort_by(f64::total_cmp);
        let row = summary.get(cfg.settings()[0], *m).unwrap();
        assert_eq!(row.delta.median, deltas[1]);
    }
}

#[test]
fn single_seed_box_collapses() {
    let cfg = ExperimentConfig { seeds: vec![5], methods: vec![Method::ChainedOracle], ..small() };
    let rec = run_cell(&cfg, cfg.settings()[0], Method::ChainedOracle, 5).unwrap();
    let summary = summarize(std::slice::from_ref(&rec));
    let b = summary.rows[0].delta;
    assert_eq!((b.q1, b.median, b.q3), (rec.delta.unwrap(), rec.delta.unwrap(), rec.delta.unwrap()));
}
