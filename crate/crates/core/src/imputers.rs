//! Imputers fitted on training data: column means and chained ridge
//! regressions, plus mask concatenation and pairwise-complete moments.

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky_array, jacobi_eigen, SymPsdMatrix};
use crate::synth::MaskedDataset;
use crate::{Error, Result};

/// Ridge penalty of the per-feature regressions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RidgePenalty {
    Fixed(f64),
    /// Scaled by the number of rows where the target feature is observed.
    PerObservation(f64),
}

impl Default for RidgePenalty {
    fn default() -> Self {
        RidgePenalty::PerObservation(1e-3)
    }
}

impl RidgePenalty {
    fn value(&self, n_obs: usize) -> f64 {
        match *self {
            RidgePenalty::Fixed(l) => l,
            RidgePenalty::PerObservation(l) => l * n_obs as f64,
        }
    }
}

/// Linear prediction of one feature from all the others (in index order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeRegressor {
    pub target: usize,
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl RidgeRegressor {
    fn predict(&self, row: ndarray::ArrayView1<f64>) -> f64 {
        let mut out = self.intercept;
        let mut k = 0;
        for (j, v) in row.iter().enumerate() {
            if j != self.target {
                out += self.coef[k] * v;
                k += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum FittedImputer {
    Mean {
        mu: Vec<f64>,
    },
    Iterative {
        mu: Vec<f64>,
        order: Vec<usize>,
        regressors: Vec<RidgeRegressor>,
        n_iter: usize,
        penalty: RidgePenalty,
    },
}

impl FittedImputer {
    pub fn dim(&self) -> usize {
        match self {
            FittedImputer::Mean { mu } | FittedImputer::Iterative { mu, .. } => mu.len(),
        }
    }

    pub fn means(&self) -> &[f64] {
        match self {
            FittedImputer::Mean { mu } | FittedImputer::Iterative { mu, .. } => mu,
        }
    }
}

fn column_means(data: &MaskedDataset) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; data.d()];
    let mut counts = vec![0usize; data.d()];
    for i in 0..data.n() {
        for j in 0..data.d() {
            if let Some(v) = data.get(i, j) {
                sums[j] += v;
                counts[j] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .enumerate()
        .map(|(j, (s, &c))| {
            if c == 0 {
                Err(Error::EmptyColumn { feature: j })
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}

pub fn fit_mean(train: &MaskedDataset) -> Result<FittedImputer> {
    Ok(FittedImputer::Mean {
        mu: column_means(train)?,
    })
}

fn mean_filled(data: &MaskedDataset, mu: &[f64]) -> Array2<f64> {
    let mut x = data.zero_filled();
    for ((i, j), v) in x.indexed_iter_mut() {
        if data.is_missing(i, j) {
            *v = mu[j];
        }
    }
    x
}

/// Ridge fit of column `target` on the other columns over `rows`, with an
/// unpenalised intercept.
fn fit_ridge(x: &Array2<f64>, rows: &[usize], target: usize, lambda: f64) -> Result<RidgeRegressor> {
    let d = x.ncols();
    let others: Vec<usize> = (0..d).filter(|&j| j != target).collect();
    let sub = x.select(Axis(0), rows);
    let feats = sub.select(Axis(1), &others);
    let y = sub.column(target);
    let n = rows.len() as f64;
    let x_mean = feats.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(others.len()));
    let y_mean = y.sum() / n;
    let centred = &feats - &x_mean;
    let yc = y.mapv(|v| v - y_mean);
    let mut gram = centred.t().dot(&centred);
    for k in 0..others.len() {
        gram[[k, k]] += lambda;
    }
    let rhs = centred.t().dot(&yc);
    let coef = if others.is_empty() {
        Array1::zeros(0)
    } else {
        cholesky_array(&gram)?.solve(rhs.view())
    };
    Ok(RidgeRegressor {
        target,
        intercept: y_mean - x_mean.dot(&coef),
        coef: coef.to_vec(),
    })
}

/// Chained-equation imputer.
///
/// Missing entries start at the column means; each round regresses every
/// feature (in ascending order) on all the others using the rows where it is
/// observed and overwrites its missing entries. The regressors of the last
/// round are kept for [`transform`], which replays `n_iter` round-robin passes
/// of them starting from the column means.
pub fn fit_iterative(train: &MaskedDataset, penalty: RidgePenalty, n_iter: usize) -> Result<FittedImputer> {
    let mu = column_means(train)?;
    if n_iter == 0 {
        return Ok(FittedImputer::Mean { mu });
    }
    let d = train.d();
    let mut x = mean_filled(train, &mu);
    let observed: Vec<Vec<usize>> = (0..d)
        .map(|j| (0..train.n()).filter(|&i| !train.is_missing(i, j)).collect())
        .collect();
    let order: Vec<usize> = (0..d).collect();
    let mut regressors = Vec::new();
    for _ in 0..n_iter {
        regressors.clear();
        for &j in &order {
            let reg = fit_ridge(&x, &observed[j], j, penalty.value(observed[j].len()))?;
            for i in 0..train.n() {
                if train.is_missing(i, j) {
                    x[[i, j]] = reg.predict(x.row(i));
                }
            }
            regressors.push(reg);
        }
    }
    Ok(FittedImputer::Iterative {
        mu,
        order,
        regressors,
        n_iter,
        penalty,
    })
}

/// Completes `data`: observed entries are copied, missing ones filled by the imputer.
pub fn transform(imp: &FittedImputer, data: &MaskedDataset) -> Result<Array2<f64>> {
    if imp.dim() != data.d() {
        return Err(Error::DimensionMismatch {
            expected: imp.dim(),
            got: data.d(),
        });
    }
    let mut x = mean_filled(data, imp.means());
    if let FittedImputer::Iterative { regressors, n_iter, .. } = imp {
        for i in 0..data.n() {
            for _ in 0..*n_iter {
                for reg in regressors {
                    if data.is_missing(i, reg.target) {
                        x[[i, reg.target]] = reg.predict(x.row(i));
                    }
                }
            }
        }
    }
    Ok(x)
}

/// `[imputed | mask]` with the mask as 0/1 reals.
pub fn concat_mask(imputed: &Array2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
    if imputed.dim() != mask.dim() {
        return Err(Error::DimensionMismatch {
            expected: imputed.len(),
            got: mask.len(),
        });
    }
    let m = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    Ok(concatenate(Axis(1), &[imputed.view(), m.view()]).expect("shapes checked"))
}

/// Moments estimated from observed entries only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedMoments {
    pub mu_hat: Vec<f64>,
    pub sigma_hat: SymPsdMatrix,
    /// Pairwise co-observation counts; the diagonal holds per-feature counts.
    pub counts: Array2<usize>,
    pub psd_repaired: bool,
}

/// Per-feature means over observed entries and pairwise-complete covariances
/// (unbiased, with means taken over each pair's common rows). A non-PSD
/// estimate has its eigenvalues clipped from below at `1e-8 * trace / d`.
pub fn masked_moments(train: &MaskedDataset) -> Result<MaskedMoments> {
    let d = train.d();
    let x = train.zero_filled();
    let obs = train.mask().mapv(|m| if m { 0.0 } else { 1.0 });
    let counts_f = obs.t().dot(&obs);
    let sums = obs.t().dot(&x); // sums[i, j] = sum of x_j over rows where i and j observed
    let cross = x.t().dot(&x);
    let mut sigma = Array2::<f64>::zeros((d, d));
    let mut counts = Array2::<usize>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let c = counts_f[[i, j]].round() as usize;
            counts[[i, j]] = c;
            if c < 2 {
                return Err(Error::EmptyPair { i, j });
            }
            let cf = c as f64;
            // sums[[j, i]] is the sum of x_i over the pair's rows
            let mean_i = sums[[j, i]] / cf;
            let mean_j = sums[[i, j]] / cf;
            sigma[[i, j]] = (cross[[i, j]] - cf * mean_i * mean_j) / (cf - 1.0);
        }
    }
    let mu_hat: Vec<f64> = (0..d).map(|j| sums[[j, j]] / counts_f[[j, j]]).collect();
    let sigma = SymPsdMatrix::symmetrized(sigma);
    let (eig, vecs) = jacobi_eigen(sigma.as_array());
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(MaskedMoments {
            mu_hat,
            sigma_hat: sigma,
            counts,
            psd_repaired: false,
        });
    }
    let floor = 1e-8 * eig.iter().map(|e| e.max(0.0)).sum::<f64>() / d as f64;
    let clipped = eig.mapv(|e| e.max(floor));
    let rebuilt = (&vecs * &clipped).dot(&vecs.t());
    Ok(MaskedMoments {
        mu_hat,
        sigma_hat: SymPsdMatrix::symmetrized(rebuilt),
        counts,
        psd_repaired: true,
    })
}
