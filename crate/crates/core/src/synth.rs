//! Synthetic regression problems with missing covariates.
//!
//! A problem is a Gaussian design `N(mu, Sigma)` with low-rank-plus-diagonal
//! covariance, a ridge-function response at fixed signal-to-noise ratio and a
//! missingness mechanism (MCAR or Gaussian self-masking).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{sample_gaussian, std_normal_cdf, GaussianModel, SymPsdMatrix};
use crate::rng::derived;
use crate::{Error, Result};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

pub(crate) use string_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrLevel {
    High,
    Low,
}

string_enum!(CorrLevel { High => "high", Low => "low" });

impl CorrLevel {
    /// Rank of the low-rank factor: a lower rank gives stronger correlations.
    pub fn rank(&self, d: usize) -> usize {
        let frac = match self {
            CorrLevel::High => 0.3,
            CorrLevel::Low => 0.7,
        };
        ((frac * d as f64) as usize).clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FstarKind {
    Bowl,
    Wave,
    Linear,
}

string_enum!(FstarKind { Bowl => "bowl", Wave => "wave", Linear => "linear" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Mcar,
    Gsm,
}

string_enum!(MechanismKind { Mcar => "mcar", Gsm => "gsm" });

/// Everything needed to regenerate one synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub d: usize,
    pub corr_level: CorrLevel,
    pub fstar: FstarKind,
    pub mechanism: MechanismKind,
    #[serde(default = "default_rate")]
    pub missing_rate: f64,
    #[serde(default = "default_snr")]
    pub snr: f64,
    pub seed: u64,
}

fn default_rate() -> f64 {
    0.5
}

fn default_snr() -> f64 {
    10.0
}

impl DataSpec {
    pub fn new(
        d: usize,
        corr_level: CorrLevel,
        fstar: FstarKind,
        mechanism: MechanismKind,
        seed: u64,
    ) -> Self {
        DataSpec {
            d,
            corr_level,
            fstar,
            mechanism,
            missing_rate: default_rate(),
            snr: default_snr(),
            seed,
        }
    }

    pub fn rank(&self) -> usize {
        self.corr_level.rank(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("d must be positive".into()));
        }
        if !(self.missing_rate > 0.0 && self.missing_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "missing rate {} outside (0, 1)",
                self.missing_rate
            )));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidArgument(format!("snr {} must be positive", self.snr)));
        }
        Ok(())
    }
}

/// Draws `mu ~ N(0, I)` and `Sigma = B Bᵀ + D` with `B` a d×q standard normal
/// matrix and `D_jj = 0.01 (B Bᵀ)_jj + 1e-6`.
pub fn make_model<R: Rng + ?Sized>(spec: &DataSpec, rng: &mut R) -> Result<GaussianModel> {
    spec.validate()?;
    let (d, q) = (spec.d, spec.rank());
    let mu: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let b = Array2::from_shape_fn((d, q), |_| rng.sample::<f64, _>(StandardNormal));
    let mut sigma = b.dot(&b.t());
    for j in 0..d {
        sigma[[j, j]] += 0.01 * sigma[[j, j]] + 1e-6;
    }
    GaussianModel::new(mu, SymPsdMatrix::symmetrized(sigma))
}

/// Single-index response `f(z)` with `z = betaᵀx + beta0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFunctionSpec {
    pub kind: FstarKind,
    pub beta: Vec<f64>,
    pub beta0: f64,
    pub gamma: f64,
    pub bumps: Vec<(f64, f64)>,
}

pub fn wave_gamma() -> f64 {
    20.0 * (std::f64::consts::PI / 8.0).sqrt()
}

pub const WAVE_BUMPS: [(f64, f64); 3] = [(2.0, -0.8), (-4.0, -1.0), (2.0, -1.2)];

impl RidgeFunctionSpec {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// `betaᵀx + beta0`, accumulated in index order.
    pub fn index(&self, x: ArrayView1<f64>) -> f64 {
        let mut z = 0.0;
        for (b, v) in self.beta.iter().zip(x.iter()) {
            z += b * v;
        }
        z + self.beta0
    }

    /// The response as a function of the index.
    pub fn profile(&self, z: f64) -> f64 {
        match self.kind {
            FstarKind::Bowl => (z - 1.0).powi(2),
            FstarKind::Linear => z - 1.0,
            FstarKind::Wave => {
                let mut out = z - 1.0;
                for &(a, b) in &self.bumps {
                    out += a * std_normal_cdf(self.gamma * (z + b));
                }
                out
            }
        }
    }

    /// `E[profile(Z)]` for `Z ~ N(mean, var)`; reduces to `profile(mean)` at `var = 0`.
    pub fn expected_profile(&self, mean: f64, var: f64) -> f64 {
        if var == 0.0 {
            return self.profile(mean);
        }
        match self.kind {
            FstarKind::Bowl => (mean - 1.0).powi(2) + var,
            FstarKind::Linear => mean - 1.0,
            FstarKind::Wave => {
                let scale = (1.0 / (self.gamma * self.gamma) + var).sqrt();
                let mut out = mean - 1.0;
                for &(a, b) in &self.bumps {
                    out += a * std_normal_cdf((mean + b) / scale);
                }
                out
            }
        }
    }
}

/// `beta` is the all-ones vector scaled so that `var(betaᵀX) = 1`, and `beta0`
/// centres the index at 1.
pub fn make_fstar(kind: FstarKind, model: &GaussianModel) -> Result<RidgeFunctionSpec> {
    let total = model.sigma().as_array().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateVariance(total));
    }
    let d = model.dim();
    let scale = 1.0 / total.sqrt();
    let beta = vec![scale; d];
    let beta0 = 1.0 - beta.iter().zip(model.mu()).map(|(b, m)| b * m).sum::<f64>();
    let (gamma, bumps) = match kind {
        FstarKind::Wave => (wave_gamma(), WAVE_BUMPS.to_vec()),
        _ => (0.0, Vec::new()),
    };
    Ok(RidgeFunctionSpec {
        kind,
        beta,
        beta0,
        gamma,
        bumps,
    })
}

pub fn eval_fstar(f: &RidgeFunctionSpec, x: ArrayView1<f64>) -> f64 {
    f.profile(f.index(x))
}

pub fn eval_fstar_rows(f: &RidgeFunctionSpec, x: &Array2<f64>) -> Array1<f64> {
    x.rows().into_iter().map(|r| eval_fstar(f, r)).collect()
}

/// `y = f*(x) + eps` with noise variance `var(f*(X)) / snr`, the variance being
/// the empirical one over the given rows.
pub fn gen_response<R: Rng + ?Sized>(
    x: &Array2<f64>,
    f: &RidgeFunctionSpec,
    snr: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if !(snr > 0.0) {
        return Err(Error::InvalidArgument(format!("snr {snr} must be positive")));
    }
    let signal = eval_fstar_rows(f, x);
    let sd = (signal.var(0.0) / snr).sqrt();
    Ok(signal.mapv(|v| v + sd * rng.sample::<f64, _>(StandardNormal)))
}

/// Independent Bernoulli(rate) mask; `true` means missing.
pub fn mask_mcar<R: Rng + ?Sized>(n: usize, d: usize, rate: f64, rng: &mut R) -> Array2<bool> {
    Array2::from_shape_simple_fn((n, d), || rng.random::<f64>() < rate)
}

/// Per-feature Gaussian self-masking: entry j is missing with probability
/// `k_j exp(-(x_j - mu_tilde_j)² / (2 sigma_tilde_sq_j))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsmParams {
    pub mu_tilde: Vec<f64>,
    pub sigma_tilde_sq: Vec<f64>,
    pub k: Vec<f64>,
}

impl GsmParams {
    pub fn dim(&self) -> usize {
        self.mu_tilde.len()
    }

    pub fn missing_prob(&self, j: usize, x: f64) -> f64 {
        self.k[j] * (-(x - self.mu_tilde[j]).powi(2) / (2.0 * self.sigma_tilde_sq[j])).exp()
    }

    /// Marginal missing rate of feature j when `X_j ~ N(mean, var)`.
    pub fn marginal_rate(&self, j: usize, mean: f64, var: f64) -> f64 {
        let s2 = self.sigma_tilde_sq[j];
        self.k[j] * (s2 / (s2 + var)).sqrt()
            * (-(mean - self.mu_tilde[j]).powi(2) / (2.0 * (s2 + var))).exp()
    }
}

/// Centres each bump one standard deviation above the feature mean with width
/// equal to that standard deviation, then solves for the peak probability
/// giving the requested marginal rate.
pub fn calibrate_gsm(model: &GaussianModel, rate: f64) -> Result<GsmParams> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("missing rate {rate} outside [0, 1)")));
    }
    let d = model.dim();
    let mut params = GsmParams {
        mu_tilde: Vec::with_capacity(d),
        sigma_tilde_sq: Vec::with_capacity(d),
        k: vec![1.0; d],
    };
    for j in 0..d {
        let var = model.sigma().get(j, j);
        if !(var > 0.0) {
            return Err(Error::DegenerateVariance(var));
        }
        params.mu_tilde.push(model.mu()[j] + var.sqrt());
        params.sigma_tilde_sq.push(var);
    }
    for j in 0..d {
        let var = model.sigma().get(j, j);
        let unit = params.marginal_rate(j, model.mu()[j], var);
        let k = rate / unit;
        if k > 1.0 {
            return Err(Error::UnreachableRate {
                feature: j,
                required_k: k,
            });
        }
        params.k[j] = k;
    }
    Ok(params)
}

pub fn mask_gsm<R: Rng + ?Sized>(x: &Array2<f64>, params: &GsmParams, rng: &mut R) -> Array2<bool> {
    let (n, d) = x.dim();
    let mut mask = Array2::from_elem((n, d), false);
    for i in 0..n {
        for j in 0..d {
            mask[[i, j]] = rng.random::<f64>() < params.missing_prob(j, x[[i, j]]);
        }
    }
    mask
}

/// Observed covariates, mask and response.
///
/// Learners only see values through the accessors below, all of which hide
/// masked entries. The complete matrix is reachable through
/// [`MaskedDataset::ground_truth`], reserved for oracles and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDataset {
    values: Array2<f64>,
    mask: Array2<bool>,
    y: Array1<f64>,
}

impl MaskedDataset {
    pub fn new(values: Array2<f64>, mask: Array2<bool>, y: Array1<f64>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                got: mask.len(),
            });
        }
        if y.len() != values.nrows() {
            return Err(Error::DimensionMismatch {
                expected: values.nrows(),
                got: y.len(),
            });
        }
        Ok(MaskedDataset { values, mask, y })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (!self.mask[[i, j]]).then(|| self.values[[i, j]])
    }

    pub fn pattern(&self, i: usize) -> Vec<bool> {
        self.mask.row(i).to_vec()
    }

    /// Observed values of row i in increasing feature order.
    pub fn observed_values(&self, i: usize) -> Vec<f64> {
        (0..self.d()).filter_map(|j| self.get(i, j)).collect()
    }

    /// Copy of the covariates with missing entries replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Array2<f64> {
        let mut out = self.values.clone();
        out.zip_mut_with(&self.mask, |v, &m| {
            if m {
                *v = fill;
            }
        });
        out
    }

    pub fn zero_filled(&self) -> Array2<f64> {
        self.filled(0.0)
    }

    pub fn with_nan(&self) -> Array2<f64> {
        self.filled(f64::NAN)
    }

    pub fn mask_f64(&self) -> Array2<f64> {
        self.mask.mapv(|m| if m { 1.0 } else { 0.0 })
    }

    pub fn missing_rate(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len().max(1) as f64
    }

    pub fn subset(&self, rows: &[usize]) -> MaskedDataset {
        MaskedDataset {
            values: self.values.select(Axis(0), rows),
            mask: self.mask.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> MaskedDataset {
        MaskedDataset {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            mask: self.mask.slice(s![start..end, ..]).to_owned(),
            y: self.y.slice(s![start..end]).to_owned(),
        }
    }

    /// The complete covariates including masked entries. Oracles and
    /// evaluation only; learners must not call this.
    pub fn ground_truth(&self) -> &Array2<f64> {
        &self.values
    }

    /// CSV with columns `x0..x{d-1}, m0..m{d-1}, y`; masked values are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.d();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.extend((0..d).map(|j| format!("m{j}")));
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = (0..d)
                .map(|j| self.get(i, j).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            rec.extend((0..d).map(|j| if self.mask[[i, j]] { "1" } else { "0" }.to_string()));
            rec.push(self.y[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A generated problem: the ground-truth distribution plus train/val/test splits.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    pub spec: DataSpec,
    pub model: GaussianModel,
    pub fstar: RidgeFunctionSpec,
    pub gsm: Option<GsmParams>,
    pub train: MaskedDataset,
    pub val: MaskedDataset,
    pub test: MaskedDataset,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    spec: &'a DataSpec,
    model: &'a GaussianModel,
    fstar: &'a RidgeFunctionSpec,
    gsm: &'a Option<GsmParams>,
}

impl SyntheticProblem {
    pub fn generate(spec: &DataSpec, n_train: usize, n_val: usize, n_test: usize) -> Result<Self> {
        spec.validate()?;
        let model = make_model(spec, &mut derived(spec.seed, "model"))?;
        let fstar = make_fstar(spec.fstar, &model)?;
        let gsm = match spec.mechanism {
            MechanismKind::Mcar => None,
            MechanismKind::Gsm => Some(calibrate_gsm(&model, spec.missing_rate)?),
        };
        let n = n_train + n_val + n_test;
        let x = sample_gaussian(&model, n, &mut derived(spec.seed, "covariates"))?;
        let y = gen_response(&x, &fstar, spec.snr, &mut derived(spec.seed, "noise"))?;
        let mut mask_rng = derived(spec.seed, "mask");
        let mask = match &gsm {
            None => mask_mcar(n, spec.d, spec.missing_rate, &mut mask_rng),
            Some(p) => mask_gsm(&x, p, &mut mask_rng),
        };
        let all = MaskedDataset::new(x, mask, y)?;
        Ok(SyntheticProblem {
            spec: spec.clone(),
            model,
            fstar,
            gsm,
            train: all.slice(0, n_train),
            val: all.slice(n_train, n_train + n_val),
            test: all.slice(n_train + n_val, n),
        })
    }

    /// JSON with the spec, the Gaussian model, the response and mask parameters.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Sidecar {
            spec: &self.spec,
            model: &self.model,
            fstar: &self.fstar,
            gsm: &self.gsm,
        })?)
    }

    /// Writes `{name}_{train,val,test}.csv` and `{name}.json` into `dir`.
    pub fn export(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.train.write_csv(&dir.join(format!("{name}_train.csv")))?;
        self.val.write_csv(&dir.join(format!("{name}_val.csv")))?;
        self.test.write_csv(&dir.join(format!("{name}_test.csv")))?;
        std::fs::write(dir.join(format!("{name}.json")), self.sidecar_json()?)?;
        Ok(())
    }
}
