//! The experiment grid: every (correlation, response, mechanism, seed) cell
//! is generated once per method, each method is fitted on the training split
//! and scored by test R² against the Bayes predictor on the same rows.

use std::fmt;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gbrt::{fit_gbrt, predict_gbrt, GbrtConfig};
use crate::imputers::{concat_mask, fit_iterative, fit_mean, transform, RidgePenalty};
use crate::neumiss::{masked_inputs, train_neumiss, NeuMissOptions};
use crate::nn::{select_architecture, Inputs, LabeledData, MlpParams, Network, TrainConfig, MLP_WIDTH};
pub use crate::nn::r2_score;
use crate::oracles::{bayes_predict_dataset, chained_predict_dataset, oracle_impute_dataset, OracleContext};
use crate::rng::{derive_seed, derived};
use crate::synth::{string_enum, CorrLevel, DataSpec, FstarKind, MechanismKind, SyntheticProblem};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bayes,
    ChainedOracle,
    OracleMlp,
    MeanMlp,
    MeanMaskMlp,
    MiceMlp,
    MiceMaskMlp,
    Gbrt,
    NeumissMlp,
}

string_enum!(Method {
    Bayes => "bayes",
    ChainedOracle => "chained_oracle",
    OracleMlp => "oracle_mlp",
    MeanMlp => "mean_mlp",
    MeanMaskMlp => "mean_mask_mlp",
    MiceMlp => "mice_mlp",
    MiceMaskMlp => "mice_mask_mlp",
    Gbrt => "gbrt",
    NeumissMlp => "neumiss_mlp",
});

impl Method {
    /// Methods that use the true distribution.
    pub fn is_oracle(&self) -> bool {
        matches!(self, Method::Bayes | Method::ChainedOracle | Method::OracleMlp)
    }

    pub fn pipeline(&self) -> PredictorPipeline {
        use Imputation as I;
        use Regressor as R;
        let (imputation, with_mask, regressor) = match self {
            Method::Bayes => (I::None, false, R::Bayes),
            Method::ChainedOracle => (I::Oracle, false, R::TrueResponse),
            Method::OracleMlp => (I::Oracle, false, R::Mlp),
            Method::MeanMlp => (I::Mean, false, R::Mlp),
            Method::MeanMaskMlp => (I::Mean, true, R::Mlp),
            Method::MiceMlp => (I::Iterative, false, R::Mlp),
            Method::MiceMaskMlp => (I::Iterative, true, R::Mlp),
            Method::Gbrt => (I::None, false, R::Gbrt),
            Method::NeumissMlp => (I::NeuMiss, false, R::Joint),
        };
        PredictorPipeline {
            imputation,
            with_mask,
            regressor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    None,
    Oracle,
    Mean,
    Iterative,
    NeuMiss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regressor {
    Bayes,
    TrueResponse,
    Mlp,
    Gbrt,
    /// Trained together with the imputation.
    Joint,
}

/// Imputation, optional mask concatenation and regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PredictorPipeline {
    pub imputation: Imputation,
    pub with_mask: bool,
    pub regressor: Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub corr_levels: Vec<CorrLevel>,
    pub fstars: Vec<FstarKind>,
    pub mechanisms: Vec<MechanismKind>,
    pub missing_rate: f64,
    pub snr: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Hidden-layer counts tried for every MLP.
    pub mlp_hidden: Vec<usize>,
    pub imputer_iterations: usize,
    pub train: TrainConfig,
    pub gbrt: GbrtConfig,
    pub neumiss: NeuMissOptions,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d: 10,
            corr_levels: CorrLevel::ALL.to_vec(),
            fstars: vec![FstarKind::Bowl, FstarKind::Wave],
            mechanisms: MechanismKind::ALL.to_vec(),
            missing_rate: 0.5,
            snr: 10.0,
            n_train: 20_000,
            n_val: 5_000,
            n_test: 5_000,
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
            mlp_hidden: vec![0, 1, 2],
            imputer_iterations: 10,
            train: TrainConfig::default(),
            gbrt: GbrtConfig::default(),
            neumiss: NeuMissOptions::default(),
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML or JSON, chosen by file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dimension 50, 100 000 training rows, 10 000 validation and test rows,
    /// ten seeds.
    pub fn paper_scale(mut self) -> Self {
        self.d = 50;
        self.n_train = 100_000;
        self.n_val = 10_000;
        self.n_test = 10_000;
        self.seeds = (0..10).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.corr_levels.is_empty() || self.fstars.is_empty() || self.mechanisms.is_empty() {
            return bad("empty grid axis");
        }
        if self.seeds.is_empty() || self.methods.is_empty() {
            return bad("no seeds or no methods");
        }
        if self.mlp_hidden.is_empty() {
            return bad("no MLP architectures");
        }
        if self.n_train == 0 || self.n_val < 2 || self.n_test < 2 {
            return bad("split sizes too small");
        }
        if self.neumiss.depths.is_empty() {
            return bad("no NeuMiss depths");
        }
        self.train.validate()?;
        self.gbrt.validate()?;
        for s in self.settings() {
            self.data_spec(&s, 0).validate()?;
        }
        Ok(())
    }

    pub fn settings(&self) -> Vec<Setting> {
        let mut out = Vec::new();
        for &corr in &self.corr_levels {
            for &fstar in &self.fstars {
                for &mechanism in &self.mechanisms {
                    out.push(Setting { corr, fstar, mechanism });
                }
            }
        }
        out
    }

    pub fn data_spec(&self, s: &Setting, seed: u64) -> DataSpec {
        let mut spec = DataSpec::new(self.d, s.corr, s.fstar, s.mechanism, seed);
        spec.missing_rate = self.missing_rate;
        spec.snr = self.snr;
        spec
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Setting {
    pub corr: CorrLevel,
    pub fstar: FstarKind,
    pub mechanism: MechanismKind,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.corr, self.fstar, self.mechanism)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: Method,
    pub corr: CorrLevel,
    pub fstar: FstarKind,
    pub mechanism: MechanismKind,
    pub seed: u64,
    pub r2: Option<f64>,
    pub r2_bayes: Option<f64>,
    pub delta: Option<f64>,
    pub wall_time: f64,
    pub status: String,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "method", "corr", "fstar", "mechanism", "seed", "r2", "r2_bayes", "delta", "wall_time", "status",
];

impl ResultRecord {
    pub fn setting(&self) -> Setting {
        Setting {
            corr: self.corr,
            fstar: self.fstar,
            mechanism: self.mechanism,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn sort_key(&self) -> (Setting, u64, Method) {
        (self.setting(), self.seed, self.method)
    }
}

fn train_mlp(
    cfg: &ExperimentConfig,
    train: Array2<f64>,
    val: Array2<f64>,
    test: Array2<f64>,
    problem: &SyntheticProblem,
    seed: u64,
) -> Result<Array1<f64>> {
    let d_in = train.ncols();
    let train_data = LabeledData::new(Inputs::features(train), problem.train.y().clone())?;
    let val_data = LabeledData::new(Inputs::features(val), problem.val.y().clone())?;
    let candidates = cfg
        .mlp_hidden
        .iter()
        .map(|&h| MlpParams::new(d_in, h, MLP_WIDTH, &mut derived(seed, &format!("init-{h}"))))
        .collect();
    let tc = TrainConfig {
        seed: derive_seed(seed, "shuffle"),
        ..cfg.train.clone()
    };
    let sel = select_architecture(candidates, &train_data, &val_data, &tc)?;
    sel.best().model.predict(&Inputs::features(test))
}

impl PredictorPipeline {
    /// Fits on the training split (validation for model selection) and
    /// predicts the test split.
    pub fn fit_predict(
        &self,
        cfg: &ExperimentConfig,
        problem: &SyntheticProblem,
        ctx: &OracleContext,
        seed: u64,
    ) -> Result<Array1<f64>> {
        let splits = [&problem.train, &problem.val, &problem.test];
        let imputed: Option<Vec<Array2<f64>>> = match self.imputation {
            Imputation::None | Imputation::NeuMiss => None,
            Imputation::Oracle => Some(splits.iter().map(|s| oracle_impute_dataset(ctx, s)).collect::<Result<_>>()?),
            Imputation::Mean => {
                let imp = fit_mean(&problem.train)?;
                Some(splits.iter().map(|s| transform(&imp, s)).collect::<Result<_>>()?)
            }
            Imputation::Iterative => {
                let imp = fit_iterative(&problem.train, RidgePenalty::default(), cfg.imputer_iterations)?;
                Some(splits.iter().map(|s| transform(&imp, s)).collect::<Result<_>>()?)
            }
        };
        let features = |imputed: Vec<Array2<f64>>| -> Result<Vec<Array2<f64>>> {
            if self.with_mask {
                imputed.iter().zip(splits).map(|(x, s)| concat_mask(x, s.mask())).collect()
            } else {
                Ok(imputed)
            }
        };
        match self.regressor {
            Regressor::Bayes => bayes_predict_dataset(ctx, &problem.test),
            Regressor::TrueResponse => chained_predict_dataset(ctx, &problem.test),
            Regressor::Mlp => {
                let mut f = features(imputed.expect("MLP pipelines impute"))?;
                let test = f.pop().expect("three splits");
                let val = f.pop().expect("three splits");
                let train = f.pop().expect("three splits");
                train_mlp(cfg, train, val, test, problem, seed)
            }
            Regressor::Gbrt => {
                let model = fit_gbrt(&problem.train, &cfg.gbrt)?;
                Ok(predict_gbrt(&model, &problem.test))
            }
            Regressor::Joint => {
                let tc = TrainConfig {
                    seed: derive_seed(seed, "shuffle"),
                    ..cfg.train.clone()
                };
                let sel = train_neumiss(&problem.train, &problem.val, &tc, &cfg.neumiss)?;
                sel.best().model.predict(&masked_inputs(&problem.test).inputs)
            }
        }
    }
}

/// One method on one cell. Data depend only on the setting and seed, so every
/// method of a cell sees the same rows.
pub fn run_cell(cfg: &ExperimentConfig, setting: Setting, method: Method, seed: u64) -> Result<ResultRecord> {
    let start = Instant::now();
    let wrap = |e: Error| Error::Cell {
        cell: format!("{method} {setting} seed {seed}"),
        source: Box::new(e),
    };
    let spec = cfg.data_spec(&setting, seed);
    let problem = SyntheticProblem::generate(&spec, cfg.n_train, cfg.n_val, cfg.n_test).map_err(wrap)?;
    let ctx = OracleContext::from_problem(&problem).map_err(wrap)?;
    let y = problem.test.y();
    let bayes = bayes_predict_dataset(&ctx, &problem.test).map_err(wrap)?;
    let r2_bayes = r2_score(y, &bayes).map_err(wrap)?;
    let method_seed = derive_seed(seed, &format!("{method}-{setting}"));
    let pred = method
        .pipeline()
        .fit_predict(cfg, &problem, &ctx, method_seed)
        .map_err(wrap)?;
    let r2 = r2_score(y, &pred).map_err(wrap)?;
    Ok(ResultRecord {
        method,
        corr: setting.corr,
        fstar: setting.fstar,
        mechanism: setting.mechanism,
        seed,
        r2: Some(r2),
        r2_bayes: Some(r2_bayes),
        delta: Some(r2 - r2_bayes),
        wall_time: start.elapsed().as_secs_f64(),
        status: "ok".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub setting: Setting,
    pub seed: u64,
    pub method: Method,
}

pub fn grid_tasks(cfg: &ExperimentConfig) -> Vec<Task> {
    let mut tasks = Vec::new();
    for setting in cfg.settings() {
        for &seed in &cfg.seeds {
            for &method in &cfg.methods {
                tasks.push(Task { setting, seed, method });
            }
        }
    }
    tasks
}

fn failure_record(task: &Task, message: String, wall_time: f64) -> ResultRecord {
    ResultRecord {
        method: task.method,
        corr: task.setting.corr,
        fstar: task.setting.fstar,
        mechanism: task.setting.mechanism,
        seed: task.seed,
        r2: None,
        r2_bayes: None,
        delta: None,
        wall_time,
        status: format!("failed: {}", message.replace(['\n', '\r'], " ")),
    }
}

/// Runs every task on a pool of `jobs` threads with `runner`. Errors and
/// panics become failure rows; records come back sorted by setting, seed
/// and method. `on_record` sees each record as it completes.
pub fn run_grid_with<F>(
    cfg: &ExperimentConfig,
    jobs: usize,
    runner: F,
    on_record: &(dyn Fn(&ResultRecord) + Sync),
) -> Result<Vec<ResultRecord>>
where
    F: Fn(&ExperimentConfig, Setting, Method, u64) -> Result<ResultRecord> + Sync,
{
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let tasks = grid_tasks(cfg);
    let mut records: Vec<ResultRecord> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let start = Instant::now();
                let outcome = catch_unwind(AssertUnwindSafe(|| runner(cfg, task.setting, task.method, task.seed)));
                let rec = match outcome {
                    Ok(Ok(rec)) => rec,
                    Ok(Err(e)) => failure_record(task, e.to_string(), start.elapsed().as_secs_f64()),
                    Err(panic) => {
                        let msg = panic
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into());
                        failure_record(task, format!("panic: {msg}"), start.elapsed().as_secs_f64())
                    }
                };
                on_record(&rec);
                rec
            })
            .collect()
    });
    records.sort_by_key(|r| r.sort_key());
    Ok(records)
}

pub fn run_grid(cfg: &ExperimentConfig, jobs: usize, on_record: &(dyn Fn(&ResultRecord) + Sync)) -> Result<Vec<ResultRecord>> {
    run_grid_with(cfg, jobs, run_cell, on_record)
}

pub fn write_results_csv(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Config(format!("unexpected columns {headers:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRecord>, _>>()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub crate_version: &'static str,
    pub jobs: usize,
    pub tasks: usize,
    pub failed: usize,
    pub wall_time: f64,
}

impl RunMetadata {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(BoxStats {
            n: v.len(),
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }

    pub fn overlaps(&self, other: &BoxStats) -> bool {
        self.q1 <= other.q3 && other.q1 <= self.q3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub setting: Setting,
    pub method: Method,
    pub delta: BoxStats,
    pub r2: BoxStats,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn get(&self, setting: Setting, method: Method) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.setting == setting && r.method == method)
    }

    pub fn settings(&self) -> Vec<Setting> {
        let mut s: Vec<Setting> = self.rows.iter().map(|r| r.setting).collect();
        s.dedup();
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:<15} {:>4} {:>10} {:>10} {:>10} {:>10} {:>7}",
            "setting", "method", "n", "median", "q1", "q3", "median r2", "failed"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:<15} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>7}",
                r.setting.to_string(),
                r.method.as_str(),
                r.delta.n,
                r.delta.median,
                r.delta.q1,
                r.delta.q3,
                r.r2.median,
                r.failed
            );
        }
        s
    }
}

/// Per-(setting, method) quartiles of delta and R² over successful rows.
pub fn summarize(records: &[ResultRecord]) -> Summary {
    let mut keys: Vec<(Setting, Method)> = records.iter().map(|r| (r.setting(), r.method)).collect();
    keys.sort();
    keys.dedup();
    let rows = keys
        .into_iter()
        .filter_map(|(setting, method)| {
            let group: Vec<&ResultRecord> = records
                .iter()
                .filter(|r| r.setting() == setting && r.method == method)
                .collect();
            let ok: Vec<&&ResultRecord> = group.iter().filter(|r| r.is_ok()).collect();
            let deltas: Vec<f64> = ok.iter().filter_map(|r| r.delta).collect();
            let r2s: Vec<f64> = ok.iter().filter_map(|r| r.r2).collect();
            Some(SummaryRow {
                setting,
                method,
                delta: BoxStats::from_values(&deltas)?,
                r2: BoxStats::from_values(&r2s)?,
                failed: group.len() - ok.len(),
            })
        })
        .collect();
    Summary { rows }
}

/// One panel of delta boxplots, methods along the horizontal axis.
pub fn boxplot_svg(summary: &Summary, setting: Setting) -> String {
    let rows: Vec<&SummaryRow> = summary.rows.iter().filter(|r| r.setting == setting).collect();
    let (w, h) = (80.0 * rows.len().max(1) as f64 + 100.0, 360.0);
    let (left, top, bottom) = (70.0, 40.0, 90.0);
    let plot_h = h - top - bottom;
    let lo = rows.iter().map(|r| r.delta.min).fold(0.0f64, f64::min);
    let hi = rows.iter().map(|r| r.delta.max).fold(0.0f64, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let (lo, hi) = (lo - 0.05 * span, hi + 0.05 * span);
    let y = |v: f64| top + (hi - v) / (hi - lo) * plot_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">R² − Bayes R², {setting}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            left - 5.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{y0:.1}" x2="{}" y2="{y0:.1}" stroke="#888" stroke-dasharray="4 3"/>"##,
        w - 20.0,
        y0 = y(0.0)
    );
    for (k, r) in rows.iter().enumerate() {
        let cx = left + 40.0 + 80.0 * k as f64;
        let b = &r.delta;
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{:.1}" x2="{cx}" y2="{:.1}" stroke="black"/>"#,
            y(b.max),
            y(b.min)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{:.1}" width="40" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - 20.0,
            y(b.q3),
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - 20.0,
            y(b.median),
            cx + 20.0,
            y(b.median)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="end" transform="rotate(-40 {cx} {})">{}</text>"#,
            top + plot_h + 15.0,
            top + plot_h + 15.0,
            r.method
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `summary.txt` and one SVG panel per setting into `dir`; returns
/// the SVG paths.
pub fn write_summary(summary: &Summary, dir: &Path, svg_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    std::fs::create_dir_all(svg_dir)?;
    std::fs::write(dir.join("summary.txt"), summary.to_text())?;
    let mut paths = Vec::new();
    for setting in summary.settings() {
        let path = svg_dir.join(format!(
            "delta_{}_{}_{}.svg",
            setting.corr, setting.fstar, setting.mechanism
        ));
        std::fs::write(&path, boxplot_svg(summary, setting))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub results_csv: PathBuf,
    pub metadata: RunMetadata,
    pub svgs: Vec<PathBuf>,
}

/// Runs the grid and writes `results.csv`, `run_metadata.json`,
/// `summary.txt` and `svg/` under `cfg.out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    jobs: usize,
    on_record: &(dyn Fn(&ResultRecord) + Sync),
) -> Result<RunOutput> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let records = run_grid(cfg, jobs, on_record)?;
    let results_csv = cfg.out_dir.join("results.csv");
    write_results_csv(&results_csv, &records)?;
    let metadata = RunMetadata {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        crate_version: env!("CARGO_PKG_VERSION"),
        jobs,
        tasks: records.len(),
        failed: records.iter().filter(|r| !r.is_ok()).count(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    metadata.write(&cfg.out_dir.join("run_metadata.json"))?;
    let svgs = write_summary(&summarize(&records), &cfg.out_dir, &cfg.out_dir.join("svg"))?;
    Ok(RunOutput {
        records,
        results_csv,
        metadata,
        svgs,
    })
}

/// Reads `MISSBENCH_SEED`-style overrides: a comma-separated seed list.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|e| Error::Config(format!("bad seed '{s}': {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(seeds)
}
