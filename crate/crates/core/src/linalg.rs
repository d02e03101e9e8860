//! Dense linear algebra and Gaussian conditioning.
//!
//! Matrices are small (d up to ~50) and dense, so everything here is a
//! straightforward row-major implementation on top of `ndarray`. Conditional
//! moments are always computed through Cholesky solves; no explicit inverse is
//! ever formed.

use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::synth::GsmParams;
use crate::{Error, Result};

const SYMMETRY_RTOL: f64 = 1e-12;
const PSD_EIG_RTOL: f64 = 1e-10;
const PIVOT_RTOL: f64 = 1e-12;

/// Symmetric positive semi-definite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array2<f64>", into = "Array2<f64>")]
pub struct SymPsdMatrix(Array2<f64>);

impl SymPsdMatrix {
    /// Validates symmetry (relative 1e-12) and that no eigenvalue falls below
    /// `-1e-10 * trace`.
    pub fn new(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: c,
            });
        }
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..r {
            for j in 0..i {
                if (a[[i, j]] - a[[j, i]]).abs() > SYMMETRY_RTOL * scale {
                    return Err(Error::NotSymPsd(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSymPsd("non-finite entry".into()));
        }
        let m = Self::symmetrized(a);
        if r > 0 {
            let (eig, _) = jacobi_eigen(&m.0);
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -PSD_EIG_RTOL * m.trace().abs() {
                return Err(Error::NotSymPsd(format!("eigenvalue {min:.3e}")));
            }
        }
        Ok(m)
    }

    /// Wraps a matrix known to be PSD by construction, averaging out rounding asymmetry.
    pub(crate) fn symmetrized(mut a: Array2<f64>) -> Self {
        let n = a.nrows();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (a[[i, j]] + a[[j, i]]);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        SymPsdMatrix(a)
    }

    pub fn identity(d: usize) -> Self {
        SymPsdMatrix(Array2::eye(d))
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        Self::new(Array2::from_diag(&Array1::from(diag.to_vec())))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diag().sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    /// Principal sub-matrix on `idx`.
    pub fn principal(&self, idx: &[usize]) -> SymPsdMatrix {
        SymPsdMatrix(block(&self.0, idx, idx))
    }
}

impl TryFrom<Array2<f64>> for SymPsdMatrix {
    type Error = Error;

    fn try_from(a: Array2<f64>) -> Result<Self> {
        SymPsdMatrix::new(a)
    }
}

impl From<SymPsdMatrix> for Array2<f64> {
    fn from(m: SymPsdMatrix) -> Self {
        m.0
    }
}

/// Rectangular block `a[rows, cols]`.
pub fn block(a: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| a[[rows[i], cols[j]]])
}

pub fn gather(v: ArrayView1<f64>, idx: &[usize]) -> Array1<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    pub fn factor(&self) -> &Array2<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        let mut x = b.to_owned();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[[i, k]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        let mut x = b.to_owned();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[[k, i]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let y = self.solve_lower(b);
        self.solve_upper(y.view())
    }

    /// Solves `L X = B` column by column.
    pub fn solve_lower_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(b.dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve_lower(col));
        }
        out
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(b.dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve(col));
        }
        out
    }
}

/// Cholesky factorisation; fails when a pivot drops to `1e-12 * trace / d` or below.
pub fn cholesky(sigma: &SymPsdMatrix) -> Result<Cholesky> {
    cholesky_array(sigma.as_array())
}

pub(crate) fn cholesky_array(a: &Array2<f64>) -> Result<Cholesky> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    if n == 0 {
        return Ok(Cholesky { l });
    }
    let tol = PIVOT_RTOL * a.diag().sum() / n as f64;
    for j in 0..n {
        let mut pivot = a[[j, j]];
        for k in 0..j {
            pivot -= l[[j, k]] * l[[j, k]];
        }
        if !(pivot > tol) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot,
                tolerance: tol,
            });
        }
        let ljj = pivot.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(Cholesky { l })
}

/// The data distribution N(mu, sigma) with a lazily cached Cholesky factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianModel {
    mu: Array1<f64>,
    sigma: SymPsdMatrix,
    #[serde(skip)]
    chol: OnceLock<Cholesky>,
}

impl PartialEq for GaussianModel {
    fn eq(&self, other: &Self) -> bool {
        self.mu == other.mu && self.sigma == other.sigma
    }
}

impl GaussianModel {
    pub fn new(mu: Array1<f64>, sigma: SymPsdMatrix) -> Result<Self> {
        if mu.len() != sigma.dim() {
            return Err(Error::DimensionMismatch {
                expected: sigma.dim(),
                got: mu.len(),
            });
        }
        Ok(GaussianModel {
            mu,
            sigma,
            chol: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &SymPsdMatrix {
        &self.sigma
    }

    pub fn chol(&self) -> Result<&Cholesky> {
        if let Some(c) = self.chol.get() {
            return Ok(c);
        }
        let c = cholesky(&self.sigma)?;
        Ok(self.chol.get_or_init(|| c))
    }
}

/// Draws `n` i.i.d. rows as `mu + L z`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    model: &GaussianModel,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let d = model.dim();
    let l = model.chol()?.factor();
    let mut out = Array2::zeros((n, d));
    let mut z = vec![0.0; d];
    for mut row in out.rows_mut() {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut s = model.mu[i];
            for (k, zk) in z.iter().enumerate().take(i + 1) {
                s += l[[i, k]] * zk;
            }
            row[i] = s;
        }
    }
    Ok(out)
}

/// Indices of observed (`false`) and missing (`true`) coordinates.
pub fn split_pattern(pattern: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let mut obs = Vec::new();
    let mut mis = Vec::new();
    for (j, &m) in pattern.iter().enumerate() {
        if m {
            mis.push(j);
        } else {
            obs.push(j);
        }
    }
    (obs, mis)
}

/// Law of `X_mis` given the observed coordinates (and possibly the mask).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    pub pattern: Vec<bool>,
    pub mu_c: Array1<f64>,
    pub sigma_c: SymPsdMatrix,
}

impl ConditionalGaussian {
    pub fn missing_indices(&self) -> Vec<usize> {
        split_pattern(&self.pattern).1
    }
}

/// Gaussian conditional of the missing block given `x_obs` (values at the
/// observed coordinates, in increasing index order).
pub fn condition_mcar(
    model: &GaussianModel,
    pattern: &[bool],
    x_obs: &[f64],
) -> Result<ConditionalGaussian> {
    let d = model.dim();
    if pattern.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: pattern.len(),
        });
    }
    let (obs, mis) = split_pattern(pattern);
    if x_obs.len() != obs.len() {
        return Err(Error::DimensionMismatch {
            expected: obs.len(),
            got: x_obs.len(),
        });
    }
    let sigma = model.sigma.as_array();
    let mu_m = gather(model.mu.view(), &mis);
    let s_mm = block(sigma, &mis, &mis);
    if obs.is_empty() || mis.is_empty() {
        return Ok(ConditionalGaussian {
            pattern: pattern.to_vec(),
            mu_c: mu_m,
            sigma_c: SymPsdMatrix(s_mm),
        });
    }
    let chol = cholesky_array(&block(sigma, &obs, &obs))?;
    let s_om = block(sigma, &obs, &mis);
    let centred: Array1<f64> = obs
        .iter()
        .zip(x_obs)
        .map(|(&j, &x)| x - model.mu[j])
        .collect();
    let alpha = chol.solve(centred.view());
    let mu_c = mu_m + s_om.t().dot(&alpha);
    let v = chol.solve_lower_mat(&s_om);
    let sigma_c = s_mm - v.t().dot(&v);
    Ok(ConditionalGaussian {
        pattern: pattern.to_vec(),
        mu_c,
        sigma_c: SymPsdMatrix::symmetrized(sigma_c),
    })
}

/// Conditional of the missing block under Gaussian self-masking.
///
/// The masking factor of each missing coordinate is a Gaussian bump centred at
/// `mu_tilde` with variance `sigma_tilde_sq`, so the posterior combines the
/// MCAR conditional `N(m, S)` with `N(mu_tilde, D)`:
/// `Σ = S − S (S + D)⁻¹ S`, `μ = m + S (S + D)⁻¹ (mu_tilde − m)`.
pub fn condition_gsm(
    model: &GaussianModel,
    gsm: &GsmParams,
    pattern: &[bool],
    x_obs: &[f64],
) -> Result<ConditionalGaussian> {
    if gsm.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: gsm.dim(),
        });
    }
    let base = condition_mcar(model, pattern, x_obs)?;
    let mis = base.missing_indices();
    if mis.is_empty() {
        return Ok(base);
    }
    let s = base.sigma_c.as_array();
    let mut s_plus_d = s.clone();
    for (a, &j) in mis.iter().enumerate() {
        s_plus_d[[a, a]] += gsm.sigma_tilde_sq[j];
    }
    let chol = cholesky_array(&s_plus_d)?;
    let v = chol.solve_lower_mat(s);
    let shift: Array1<f64> = mis
        .iter()
        .enumerate()
        .map(|(a, &j)| gsm.mu_tilde[j] - base.mu_c[a])
        .collect();
    let w = chol.solve_lower(shift.view());
    let mu_c = &base.mu_c + &v.t().dot(&w);
    let sigma_c = s - &v.t().dot(&v);
    Ok(ConditionalGaussian {
        pattern: base.pattern,
        mu_c,
        sigma_c: SymPsdMatrix::symmetrized(sigma_c),
    })
}

/// Largest eigenvalue of a PSD matrix by power iteration.
///
/// Stops once the Rayleigh quotient changes by less than 1e-10 (relative) or
/// after 10⁴ iterations.
pub fn top_eigenvalue(sigma: &SymPsdMatrix) -> f64 {
    let a = sigma.as_array();
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    // fixed, non-symmetric start so that no eigenvector is orthogonal to it by accident
    let mut v: Array1<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i + 1) as f64).sin()).collect();
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut rayleigh = v.dot(&a.dot(&v));
    for _ in 0..10_000 {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = v.dot(&a.dot(&v));
        let change = (next - rayleigh).abs();
        rayleigh = next;
        if change <= 1e-10 * rayleigh.abs() {
            break;
        }
    }
    rayleigh
}

/// Standard Gaussian cdf.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Returns eigenvalues (unsorted) and the matching eigenvectors as columns.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    (m.diag().to_owned(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_psd(d: usize, seed: u64) -> SymPsdMatrix {
        let mut rng = seeded(seed);
        let b = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut s = b.dot(&b.t());
        for i in 0..d {
            s[[i, i]] += 0.1;
        }
        SymPsdMatrix::new(s).unwrap()
    }

    fn random_pattern(d: usize, rng: &mut crate::rng::Rng) -> Vec<bool> {
        (0..d).map(|_| rng.random_bool(0.5)).collect()
    }

    #[test]
    fn cholesky_identity() {
        let c = cholesky(&SymPsdMatrix::identity(3)).unwrap();
        assert_eq!(c.factor(), &Array2::<f64>::eye(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = SymPsdMatrix::new(array![[4.0, 2.0], [2.0, 5.0]]).unwrap();
        let c = cholesky(&a).unwrap();
        assert_eq!(c.factor(), &array![[2.0, 0.0], [1.0, 2.0]]);
        let rebuilt = c.factor().dot(&c.factor().t());
        assert_eq!(&rebuilt, a.as_array());
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let err = cholesky_array(&array![[1.0, 2.0], [2.0, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { index: 1, .. }));
        assert!(SymPsdMatrix::new(array![[1.0, 2.0], [2.0, 1.0]]).is_err());
    }

    #[test]
    fn cholesky_reproduces_random_psd() {
        let s = random_psd(12, 3);
        let l = cholesky(&s).unwrap();
        let diff = &l.factor().dot(&l.factor().t()) - s.as_array();
        let rel = diff.mapv(|x| x * x).sum().sqrt() / s.as_array().mapv(|x| x * x).sum().sqrt();
        assert!(rel < 1e-8);
    }

    #[test]
    fn rejects_asymmetric() {
        assert!(SymPsdMatrix::new(array![[1.0, 0.5], [0.4, 1.0]]).is_err());
    }

    #[test]
    fn sample_mean_and_correlation() {
        let model = GaussianModel::new(Array1::zeros(3), SymPsdMatrix::identity(3)).unwrap();
        let x = sample_gaussian(&model, 100_000, &mut seeded(1)).unwrap();
        for m in x.mean_axis(ndarray::Axis(0)).unwrap() {
            assert!(m.abs() < 0.02, "{m}");
        }
        let sigma = SymPsdMatrix::new(array![[1.0, 0.9], [0.9, 1.0]]).unwrap();
        let model = GaussianModel::new(Array1::zeros(2), sigma).unwrap();
        let x = sample_gaussian(&model, 100_000, &mut seeded(2)).unwrap();
        let (a, b) = (x.column(0), x.column(1));
        let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
        let cov = a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>();
        let va = a.iter().map(|p| (p - ma).powi(2)).sum::<f64>();
        let vb = b.iter().map(|q| (q - mb).powi(2)).sum::<f64>();
        let corr = cov / (va * vb).sqrt();
        assert!((corr - 0.9).abs() < 0.01, "{corr}");
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let model = GaussianModel::new(array![1.0, -1.0], SymPsdMatrix::identity(2)).unwrap();
        let a = sample_gaussian(&model, 1, &mut seeded(9)).unwrap();
        let b = sample_gaussian(&model, 1, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bivariate_schur_complement() {
        let rho = 0.6;
        let sigma = SymPsdMatrix::new(array![[1.0, rho], [rho, 1.0]]).unwrap();
        let model = GaussianModel::new(Array1::zeros(2), sigma).unwrap();
        let c = condition_mcar(&model, &[false, true], &[1.5]).unwrap();
        assert_abs_diff_eq!(c.mu_c[0], rho * 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(c.sigma_c.get(0, 0), 1.0 - rho * rho, epsilon = 1e-14);
    }

    #[test]
    fn all_observed_and_all_missing_patterns() {
        let s = random_psd(4, 5);
        let mu = array![0.1, 0.2, 0.3, 0.4];
        let model = GaussianModel::new(mu.clone(), s.clone()).unwrap();
        let c = condition_mcar(&model, &[false; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.mu_c.len(), 0);
        assert_eq!(c.sigma_c.dim(), 0);
        let c = condition_mcar(&model, &[true; 4], &[]).unwrap();
        assert_eq!(c.mu_c, mu);
        assert_eq!(&c.sigma_c, &s);
    }

    #[test]
    fn single_missing_matches_regression_formula() {
        let d = 6;
        let s = random_psd(d, 11);
        let mut rng = seeded(12);
        let mu: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let model = GaussianModel::new(mu.clone(), s.clone()).unwrap();
        for j in 0..d {
            let mut pattern = vec![false; d];
            pattern[j] = true;
            let obs: Vec<usize> = (0..d).filter(|&k| k != j).collect();
            let x_obs: Vec<f64> = obs.iter().map(|_| rng.sample(StandardNormal)).collect();
            let c = condition_mcar(&model, &pattern, &x_obs).unwrap();
            // oracle: explicit normal equations via Gauss-Jordan on the obs block
            let s_oo = block(s.as_array(), &obs, &obs);
            let inv = gauss_jordan_inverse(&s_oo);
            let s_jo: Array1<f64> = obs.iter().map(|&k| s.get(j, k)).collect();
            let centred: Array1<f64> = obs.iter().zip(&x_obs).map(|(&k, x)| x - mu[k]).collect();
            let expected = mu[j] + s_jo.dot(&inv.dot(&centred));
            assert_abs_diff_eq!(c.mu_c[0], expected, epsilon = 1e-10);
        }
    }

    fn gauss_jordan_inverse(a: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut inv = Array2::<f64>::eye(n);
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
                .unwrap();
            for k in 0..n {
                m.swap([col, k], [piv, k]);
                inv.swap([col, k], [piv, k]);
            }
            let p = m[[col, col]];
            for k in 0..n {
                m[[col, k]] /= p;
                inv[[col, k]] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[[r, col]];
                    for k in 0..n {
                        m[[r, k]] -= f * m[[col, k]];
                        inv[[r, k]] -= f * inv[[col, k]];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn total_variance_recovers_marginal_block() {
        // Var(X_mis) = E[Var(X_mis | X_obs)] + Var(E[X_mis | X_obs]); the
        // conditional mean is affine with slope A = S_mo S_oo⁻¹, so
        // S_mm = Σ_c + A S_oo Aᵀ.
        let mut rng = seeded(21);
        for trial in 0..20 {
            let d = 7;
            let s = random_psd(d, 100 + trial);
            let model = GaussianModel::new(Array1::zeros(d), s.clone()).unwrap();
            let pattern = random_pattern(d, &mut rng);
            let (obs, mis) = split_pattern(&pattern);
            if obs.is_empty() || mis.is_empty() {
                continue;
            }
            let c = condition_mcar(&model, &pattern, &vec![0.0; obs.len()]).unwrap();
            let s_oo = block(s.as_array(), &obs, &obs);
            let s_mo = block(s.as_array(), &mis, &obs);
            let slope = s_mo.dot(&gauss_jordan_inverse(&s_oo));
            let rebuilt = c.sigma_c.as_array() + &slope.dot(&s_oo).dot(&slope.t());
            let target = block(s.as_array(), &mis, &mis);
            for (a, b) in rebuilt.iter().zip(target.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn conditional_matches_monte_carlo() {
        let d = 5;
        let s = random_psd(d, 31);
        let mut rng = seeded(32);
        let mu: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let model = GaussianModel::new(mu, s.clone()).unwrap();
        let pattern = vec![false, true, false, true, true];
        let (obs, mis) = split_pattern(&pattern);
        let x_star = sample_gaussian(&model, 1, &mut rng).unwrap();
        let x_obs: Vec<f64> = obs.iter().map(|&j| x_star[[0, j]]).collect();
        let c = condition_mcar(&model, &pattern, &x_obs).unwrap();
        // Rejection-free conditional sampling (Matheron's rule): draw X ~ N(mu, Σ),
        // then X_mis + S_mo S_oo⁻¹ (x_obs − X_obs) is a draw from the conditional.
        let n = 1_000_000;
        let draws = sample_gaussian(&model, n, &mut rng).unwrap();
        let s_oo = block(s.as_array(), &obs, &obs);
        let slope = block(s.as_array(), &mis, &obs).dot(&gauss_jordan_inverse(&s_oo));
        let k = mis.len();
        let mut sum = Array1::<f64>::zeros(k);
        let mut sum_sq = Array2::<f64>::zeros((k, k));
        for row in draws.rows() {
            let resid: Array1<f64> = obs.iter().zip(&x_obs).map(|(&j, x)| x - row[j]).collect();
            let corr = slope.dot(&resid);
            let z: Array1<f64> = mis.iter().enumerate().map(|(a, &j)| row[j] + corr[a]).collect();
            sum += &z;
            for a in 0..k {
                for b in 0..k {
                    sum_sq[[a, b]] += z[a] * z[b];
                }
            }
        }
        let mean = &sum / n as f64;
        for a in 0..k {
            let var = c.sigma_c.get(a, a);
            let se = (var / n as f64).sqrt();
            assert!((mean[a] - c.mu_c[a]).abs() < 3.0 * se + 1e-12, "mean {a}");
            for b in 0..k {
                let cov = sum_sq[[a, b]] / n as f64 - mean[a] * mean[b];
                let se_cov = ((c.sigma_c.get(a, a) * c.sigma_c.get(b, b)
                    + c.sigma_c.get(a, b).powi(2))
                    / n as f64)
                    .sqrt();
                assert!((cov - c.sigma_c.get(a, b)).abs() < 3.0 * se_cov, "cov {a},{b}");
            }
        }
    }

    #[test]
    fn gsm_reduces_to_mcar_for_wide_masks() {
        let mut rng = seeded(41);
        for trial in 0..10 {
            let d = 6;
            let s = random_psd(d, 200 + trial);
            let mu: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let model = GaussianModel::new(mu.clone(), s).unwrap();
            let gsm = GsmParams {
                mu_tilde: mu.to_vec(),
                sigma_tilde_sq: vec![1e8; d],
                k: vec![0.5; d],
            };
            let pattern = random_pattern(d, &mut rng);
            let n_obs = pattern.iter().filter(|m| !**m).count();
            let x_obs: Vec<f64> = (0..n_obs).map(|_| rng.sample(StandardNormal)).collect();
            let a = condition_mcar(&model, &pattern, &x_obs).unwrap();
            let b = condition_gsm(&model, &gsm, &pattern, &x_obs).unwrap();
            let sup_mu = (&a.mu_c - &b.mu_c).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let sup_s = (a.sigma_c.as_array() - b.sigma_c.as_array())
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(sup_mu < 1e-4 && sup_s < 1e-4, "{sup_mu} {sup_s}");
        }
    }

    #[test]
    fn gsm_precision_addition_in_two_dimensions() {
        // all missing, mu_tilde = mu, sigma_tilde² = diag(Σ): in 1-D the
        // precision doubles, so the variance halves and the mean stays put.
        let sigma = SymPsdMatrix::new(array![[2.0, 0.0], [0.0, 0.5]]).unwrap();
        let mu = array![1.0, -3.0];
        let model = GaussianModel::new(mu.clone(), sigma).unwrap();
        let gsm = GsmParams {
            mu_tilde: mu.to_vec(),
            sigma_tilde_sq: vec![2.0, 0.5],
            k: vec![0.5, 0.5],
        };
        let c = condition_gsm(&model, &gsm, &[true, true], &[]).unwrap();
        assert_abs_diff_eq!(c.mu_c[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.mu_c[1], -3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.sigma_c.get(0, 0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.sigma_c.get(1, 1), 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(c.sigma_c.get(0, 1), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gsm_matches_weighted_monte_carlo() {
        let d = 5;
        let s = random_psd(d, 51);
        let mut rng = seeded(52);
        let mu: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let model = GaussianModel::new(mu.clone(), s.clone()).unwrap();
        let gsm = GsmParams {
            mu_tilde: (0..d).map(|j| mu[j] + s.get(j, j).sqrt()).collect(),
            sigma_tilde_sq: (0..d).map(|j| s.get(j, j)).collect(),
            k: vec![0.9; d],
        };
        let pattern = vec![true, false, true, true, false];
        let x_obs = vec![mu[1] + 0.3, mu[4] - 0.2];
        let base = condition_mcar(&model, &pattern, &x_obs).unwrap();
        let post = condition_gsm(&model, &gsm, &pattern, &x_obs).unwrap();
        let mis = base.missing_indices();
        let l = cholesky(&base.sigma_c).unwrap();
        let n = 1_000_000;
        let k = mis.len();
        let mut wsum = 0.0;
        let mut w2sum = 0.0;
        let mut m1 = vec![0.0; k];
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Array1<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let x = &base.mu_c + &l.factor().dot(&z);
            let w: f64 = mis
                .iter()
                .enumerate()
                .map(|(a, &j)| -(x[a] - gsm.mu_tilde[j]).powi(2) / (2.0 * gsm.sigma_tilde_sq[j]))
                .sum::<f64>()
                .exp();
            wsum += w;
            w2sum += w * w;
            for a in 0..k {
                m1[a] += w * x[a];
            }
            samples.push((w, x));
        }
        let ess = wsum * wsum / w2sum;
        assert!(ess > 1000.0);
        for a in 0..k {
            let mean = m1[a] / wsum;
            let var_w: f64 = samples
                .iter()
                .map(|(w, x)| w * w * (x[a] - mean).powi(2))
                .sum::<f64>()
                / (wsum * wsum);
            let se = var_w.sqrt();
            assert!((mean - post.mu_c[a]).abs() < 3.0 * se, "coord {a}: {mean} vs {}", post.mu_c[a]);
            let var: f64 = samples.iter().map(|(w, x)| w * (x[a] - mean).powi(2)).sum::<f64>() / wsum;
            let rel = (var - post.sigma_c.get(a, a)).abs() / post.sigma_c.get(a, a);
            assert!(rel < 0.01, "var {a}: {var} vs {}", post.sigma_c.get(a, a));
        }
    }

    #[test]
    fn top_eigenvalue_simple_cases() {
        assert_abs_diff_eq!(top_eigenvalue(&SymPsdMatrix::identity(5)), 1.0, epsilon = 1e-12);
        let d = SymPsdMatrix::from_diag(&[1.0, 2.0, 3.0]).unwrap();
        assert!((top_eigenvalue(&d) - 3.0).abs() < 3e-6);
    }

    #[test]
    fn top_eigenvalue_matches_jacobi() {
        let mut rng = seeded(61);
        for _ in 0..10 {
            let (d, q) = (10, 4);
            let b = Array2::from_shape_fn((d, q), |_| rng.sample::<f64, _>(StandardNormal));
            let mut s = b.dot(&b.t());
            for i in 0..d {
                s[[i, i]] += 0.01 * s[[i, i]] + 1e-6;
            }
            let s = SymPsdMatrix::new(s).unwrap();
            let (eig, vecs) = jacobi_eigen(s.as_array());
            // the oracle itself must diagonalise: A v = λ v
            for k in 0..d {
                let v = vecs.column(k);
                let r = s.as_array().dot(&v) - &(&v * eig[k]);
                assert!(r.iter().all(|x| x.abs() < 1e-9));
            }
            let top = eig.iter().cloned().fold(f64::MIN, f64::max);
            let got = top_eigenvalue(&s);
            assert!((got - top).abs() / top < 1e-6, "{got} vs {top}");
        }
    }

    /// erf Taylor series summed with enough terms for double precision at |x| ≤ 1.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(40.0) - 1.0).abs() <= 1e-15);
        assert!(std_normal_cdf(-40.0) >= 0.0);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / std::f64::consts::SQRT_2));
        assert!((oracle - 0.8413447460685429).abs() < 1e-15);
        assert!((std_normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-12);
        for i in -20..=20 {
            let x = i as f64 * 0.07;
            let o = 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
            assert!((std_normal_cdf(x) - o).abs() < 1e-12);
        }
    }

    #[test]
    fn serde_roundtrip_keeps_model() {
        let model = GaussianModel::new(array![0.5, 1.0], random_psd(2, 71)).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: GaussianModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model);
        assert!(back.chol().is_ok());
    }
}
