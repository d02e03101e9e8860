//! Ground-truth predictors built from the generating distribution.
//!
//! All closed forms go through [`RidgeFunctionSpec::profile`] and
//! [`RidgeFunctionSpec::expected_profile`], so the response formula lives in
//! one place. The Monte-Carlo estimators here are independent routes used to
//! check the closed forms.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::linalg::{
    cholesky_array, condition_gsm, condition_mcar, sample_gaussian, ConditionalGaussian, GaussianModel,
};
use crate::rng::derived;
use crate::synth::{
    calibrate_gsm, eval_fstar, make_fstar, make_model, mask_gsm, mask_mcar, DataSpec, FstarKind, GsmParams, MaskedDataset, MechanismKind, RidgeFunctionSpec,
    SyntheticProblem,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MechanismParams {
    Mcar { rate: f64 },
    Gsm(GsmParams),
}

#[derive(Debug, Clone)]
pub struct OracleContext {
    pub model: GaussianModel,
    pub mechanism: MechanismParams,
    pub fstar: RidgeFunctionSpec,
}

impl OracleContext {
    pub fn new(model: GaussianModel, mechanism: MechanismParams, fstar: RidgeFunctionSpec) -> Result<Self> {
        let d = model.dim();
        if fstar.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: fstar.dim(),
            });
        }
        if let MechanismParams::Gsm(g) = &mechanism {
            if g.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: g.dim(),
                });
            }
        }
        Ok(OracleContext {
            model,
            mechanism,
            fstar,
        })
    }

    pub fn from_problem(p: &SyntheticProblem) -> Result<Self> {
        let mechanism = match &p.gsm {
            Some(g) => MechanismParams::Gsm(g.clone()),
            None => MechanismParams::Mcar {
                rate: p.spec.missing_rate,
            },
        };
        Self::new(p.model.clone(), mechanism, p.fstar.clone())
    }

    /// The population behind `SyntheticProblem::generate(spec, ..)`, without drawing rows.
    pub fn from_spec(spec: &DataSpec) -> Result<Self> {
        spec.validate()?;
        let model = make_model(spec, &mut derived(spec.seed, "model"))?;
        let fstar = make_fstar(spec.fstar, &model)?;
        let mechanism = match spec.mechanism {
            MechanismKind::Mcar => MechanismParams::Mcar {
                rate: spec.missing_rate,
            },
            MechanismKind::Gsm => MechanismParams::Gsm(calibrate_gsm(&model, spec.missing_rate)?),
        };
        Self::new(model, mechanism, fstar)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Law of the missing block given the observed values and the mask.
    pub fn conditional(&self, x_obs: &[f64], m: &[bool]) -> Result<ConditionalGaussian> {
        match &self.mechanism {
            MechanismParams::Mcar { .. } => condition_mcar(&self.model, m, x_obs),
            MechanismParams::Gsm(g) => condition_gsm(&self.model, g, m, x_obs),
        }
    }
}

/// Merges observed values and a vector for the missing block into a full row.
fn merge(m: &[bool], x_obs: &[f64], fill: ArrayView1<f64>) -> Array1<f64> {
    let mut obs = x_obs.iter();
    let mut mis = fill.iter();
    m.iter()
        .map(|&missing| {
            if missing {
                *mis.next().expect("fill shorter than missing block")
            } else {
                *obs.next().expect("x_obs shorter than observed block")
            }
        })
        .collect()
}

/// Conditional imputation: missing coordinates replaced by their conditional mean.
pub fn oracle_ci_impute(ctx: &OracleContext, x_obs: &[f64], m: &[bool]) -> Result<Array1<f64>> {
    let c = ctx.conditional(x_obs, m)?;
    Ok(merge(m, x_obs, c.mu_c.view()))
}

/// Conditional mean-imputed row and the conditional variance of the index.
fn index_moments(ctx: &OracleContext, x_obs: &[f64], m: &[bool]) -> Result<(Array1<f64>, f64)> {
    let c = ctx.conditional(x_obs, m)?;
    let imputed = merge(m, x_obs, c.mu_c.view());
    let beta_mis: Array1<f64> = c.missing_indices().iter().map(|&j| ctx.fstar.beta[j]).collect();
    let var = if beta_mis.is_empty() {
        0.0
    } else {
        beta_mis.dot(&c.sigma_c.as_array().dot(&beta_mis)).max(0.0)
    };
    Ok((imputed, var))
}

/// `E[f*(X) | X_obs, M]`.
pub fn bayes_predict(ctx: &OracleContext, x_obs: &[f64], m: &[bool]) -> Result<f64> {
    let (imputed, var) = index_moments(ctx, x_obs, m)?;
    Ok(ctx.fstar.expected_profile(ctx.fstar.index(imputed.view()), var))
}

/// `f*` applied to the conditionally imputed row.
pub fn chained_oracle_predict(ctx: &OracleContext, x_obs: &[f64], m: &[bool]) -> Result<f64> {
    let imputed = oracle_ci_impute(ctx, x_obs, m)?;
    Ok(eval_fstar(&ctx.fstar, imputed.view()))
}

fn map_rows(
    ctx: &OracleContext,
    data: &MaskedDataset,
    f: fn(&OracleContext, &[f64], &[bool]) -> Result<f64>,
) -> Result<Array1<f64>> {
    (0..data.n())
        .map(|i| f(ctx, &data.observed_values(i), &data.pattern(i)))
        .collect()
}

pub fn bayes_predict_dataset(ctx: &OracleContext, data: &MaskedDataset) -> Result<Array1<f64>> {
    map_rows(ctx, data, bayes_predict)
}

/// Conditional-mean imputation of every row.
pub fn oracle_impute_dataset(ctx: &OracleContext, data: &MaskedDataset) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.n(), data.d()));
    for i in 0..data.n() {
        let row = oracle_ci_impute(ctx, &data.observed_values(i), &data.pattern(i))?;
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

pub fn chained_predict_dataset(ctx: &OracleContext, data: &MaskedDataset) -> Result<Array1<f64>> {
    map_rows(ctx, data, chained_oracle_predict)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub ess: f64,
}

/// Monte-Carlo estimate of `E[g(X) | X_obs, M]`.
///
/// Draws the missing block from the MCAR Gaussian conditional. Under
/// self-masking each draw is weighted by the probability that the missing
/// coordinates are indeed masked, and the estimate is self-normalised.
pub fn mc_expectation<R, G>(
    ctx: &OracleContext,
    x_obs: &[f64],
    m: &[bool],
    n_samples: usize,
    rng: &mut R,
    g: G,
) -> Result<McEstimate>
where
    R: Rng + ?Sized,
    G: Fn(ArrayView1<f64>) -> f64,
{
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1000 samples, got {n_samples}"
        )));
    }
    let base = condition_mcar(&ctx.model, m, x_obs)?;
    let mis = base.missing_indices();
    let k = mis.len();
    let chol = cholesky_array(base.sigma_c.as_array())?;
    let l = chol.factor();
    let mut log_w = Vec::with_capacity(n_samples);
    let mut values = Vec::with_capacity(n_samples);
    let mut z = vec![0.0; k];
    let mut draw = Array1::<f64>::zeros(k);
    for _ in 0..n_samples {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for a in 0..k {
            let mut s = base.mu_c[a];
            for (b, zb) in z.iter().enumerate().take(a + 1) {
                s += l[[a, b]] * zb;
            }
            draw[a] = s;
        }
        let lw = match &ctx.mechanism {
            MechanismParams::Mcar { .. } => 0.0,
            MechanismParams::Gsm(p) => mis
                .iter()
                .enumerate()
                .map(|(a, &j)| -(draw[a] - p.mu_tilde[j]).powi(2) / (2.0 * p.sigma_tilde_sq[j]))
                .sum(),
        };
        log_w.push(lw);
        values.push(g(merge(m, x_obs, draw.view()).view()));
    }
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|lw| (lw - top).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let w2sum: f64 = w.iter().map(|x| x * x).sum();
    // centring on the first draw keeps constant integrands exact
    let anchor = values[0];
    let estimate =
        anchor + w.iter().zip(&values).map(|(wi, v)| wi * (v - anchor)).sum::<f64>() / wsum;
    let ess = wsum * wsum / w2sum;
    if ess < 100.0 {
        return Err(Error::EffectiveSampleTooSmall { ess });
    }
    let var = w
        .iter()
        .zip(&values)
        .map(|(wi, v)| wi * wi * (v - estimate).powi(2))
        .sum::<f64>()
        / (wsum * wsum);
    Ok(McEstimate {
        estimate,
        stderr: var.sqrt(),
        ess,
    })
}

/// Monte-Carlo estimate of the Bayes predictor.
pub fn mc_bayes<R: Rng + ?Sized>(
    ctx: &OracleContext,
    x_obs: &[f64],
    m: &[bool],
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    mc_expectation(ctx, x_obs, m, n_samples, rng, |x| eval_fstar(&ctx.fstar, x))
}

/// Agreement of the closed forms with [`mc_expectation`] on random probes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub fstar: FstarKind,
    pub mechanism: MechanismKind,
    pub probes: usize,
    /// Probes where the Bayes prediction lies within 3 MC stderr.
    pub bayes_agree: usize,
    /// Probes where every imputed coordinate lies within 3 MC stderr.
    pub ci_agree: usize,
}

impl AgreementReport {
    pub fn bayes_fraction(&self) -> f64 {
        self.bayes_agree as f64 / self.probes as f64
    }

    pub fn ci_fraction(&self) -> f64 {
        self.ci_agree as f64 / self.probes as f64
    }
}

fn within(exact: f64, mc: &McEstimate, z: f64) -> bool {
    (exact - mc.estimate).abs() <= z * mc.stderr + 1e-9 * (1.0 + exact.abs())
}

/// Draws `probes` rows and masks from the population of `spec` and compares
/// [`bayes_predict`] and [`oracle_ci_impute`] with `n_mc`-sample estimates.
pub fn oracle_agreement(spec: &DataSpec, probes: usize, n_mc: usize) -> Result<AgreementReport> {
    let ctx = OracleContext::from_spec(spec)?;
    let d = ctx.dim();
    let mut rng = derived(spec.seed, "oracle-probes");
    let x = sample_gaussian(&ctx.model, probes, &mut rng)?;
    let mask = match &ctx.mechanism {
        MechanismParams::Mcar { rate } => mask_mcar(probes, d, *rate, &mut rng),
        MechanismParams::Gsm(p) => mask_gsm(&x, p, &mut rng),
    };
    let results = (0..probes)
        .into_par_iter()
        .map(|i| -> Result<(bool, bool)> {
            let mut rng = derived(spec.seed, &format!("oracle-probe-{i}"));
            let m: Vec<bool> = mask.row(i).to_vec();
            let x_obs: Vec<f64> = (0..d).filter(|&j| !m[j]).map(|j| x[[i, j]]).collect();
            let exact = bayes_predict(&ctx, &x_obs, &m)?;
            let bayes_ok = within(exact, &mc_bayes(&ctx, &x_obs, &m, n_mc, &mut rng)?, 3.0);
            let ci = oracle_ci_impute(&ctx, &x_obs, &m)?;
            let mut ci_ok = true;
            for j in (0..d).filter(|&j| m[j]) {
                let mc = mc_expectation(&ctx, &x_obs, &m, n_mc, &mut rng, |x| x[j])?;
                ci_ok &= within(ci[j], &mc, 3.0);
            }
            Ok((bayes_ok, ci_ok))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AgreementReport {
        fstar: spec.fstar,
        mechanism: spec.mechanism,
        probes,
        bayes_agree: results.iter().filter(|r| r.0).count(),
        ci_agree: results.iter().filter(|r| r.1).count(),
    })
}
