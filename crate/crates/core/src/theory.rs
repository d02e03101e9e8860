//! Numerical checks of the analytic results on chaining oracles: the
//! curvature bracket on the Bayes-vs-chained gap, the excess-risk bound,
//! a 2-D continuous corrected imputation, and a case where no continuous
//! corrected imputation exists.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::linalg::{sample_gaussian, split_pattern, std_normal_cdf};
use crate::oracles::{bayes_predict, chained_oracle_predict, MechanismParams, OracleContext};
use crate::rng::derived;
use crate::synth::{eval_fstar, mask_gsm, mask_mcar, CorrLevel, DataSpec, FstarKind, MechanismKind, RidgeFunctionSpec};
use crate::{Error, Result};

/// Constant Hessian of a ridge response: `2ββᵀ` for the bowl, zero for the
/// linear response. The wave has no constant bracket.
pub fn constant_hessian(f: &RidgeFunctionSpec) -> Result<Array2<f64>> {
    let d = f.dim();
    match f.kind {
        FstarKind::Bowl => Ok(Array2::from_shape_fn((d, d), |(i, j)| 2.0 * f.beta[i] * f.beta[j])),
        FstarKind::Linear => Ok(Array2::zeros((d, d))),
        FstarKind::Wave => Err(Error::UnsupportedFstar(
            "wave has no constant Hessian bracket".into(),
        )),
    }
}

/// `tr(H_mis,mis Σ)` for the missing block.
fn block_trace(h: &Array2<f64>, mis: &[usize], sigma: &Array2<f64>) -> f64 {
    let mut tr = 0.0;
    for (a, &i) in mis.iter().enumerate() {
        for (b, &j) in mis.iter().enumerate() {
            tr += h[[i, j]] * sigma[[b, a]];
        }
    }
    tr
}

/// Draws complete rows and their masks from the context's population.
pub fn sample_masked<R: Rng + ?Sized>(ctx: &OracleContext, n: usize, rng: &mut R) -> Result<(Array2<f64>, Array2<bool>)> {
    let x = sample_gaussian(&ctx.model, n, rng)?;
    let mask = match &ctx.mechanism {
        MechanismParams::Mcar { rate } => mask_mcar(n, ctx.dim(), *rate, rng),
        MechanismParams::Gsm(p) => mask_gsm(&x, p, rng),
    };
    Ok((x, mask))
}

fn observed_part(x: ndarray::ArrayView1<f64>, m: &[bool]) -> Vec<f64> {
    x.iter().zip(m).filter(|(_, &mis)| !mis).map(|(v, _)| *v).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundProbe {
    pub pattern: Vec<bool>,
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub fstar: FstarKind,
    pub probes: Vec<BoundProbe>,
    pub violations: usize,
}

/// Compares `bayes − chained` with `½ tr(H_mis,mis Σ_mis|obs,M)` on random
/// rows and masks drawn from the population.
pub fn lemma1_check<R: Rng + ?Sized>(ctx: &OracleContext, probes: usize, rng: &mut R) -> Result<BoundReport> {
    let h = constant_hessian(&ctx.fstar)?;
    let (x, mask) = sample_masked(ctx, probes, rng)?;
    let mut out = Vec::with_capacity(probes);
    for i in 0..probes {
        let m: Vec<bool> = mask.row(i).to_vec();
        let x_obs = observed_part(x.row(i), &m);
        let gap = bayes_predict(ctx, &x_obs, &m)? - chained_oracle_predict(ctx, &x_obs, &m)?;
        let (_, mis) = split_pattern(&m);
        let half_tr = if mis.is_empty() {
            0.0
        } else {
            let cond = ctx.conditional(&x_obs, &m)?;
            0.5 * block_trace(&h, &mis, cond.sigma_c.as_array())
        };
        let tol = 1e-8 * (1.0 + half_tr.abs());
        out.push(BoundProbe {
            pattern: m,
            lower: half_tr,
            upper: half_tr,
            gap,
            satisfied: gap >= half_tr - tol && gap <= half_tr + tol,
        });
    }
    let violations = out.iter().filter(|p| !p.satisfied).count();
    Ok(BoundReport {
        fstar: ctx.fstar.kind,
        probes: out,
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExcessReport {
    /// Monte-Carlo `R(f*∘Φ_CI) − R(Bayes)` from paired squared errors.
    pub mc_excess: f64,
    pub mc_stderr: f64,
    /// `¼ E_M[max(tr(H⁻Σ)², tr(H⁺Σ)²)]` over the same masks.
    pub bound: f64,
    pub n: usize,
    pub satisfied: bool,
}

/// Excess risk of the chained oracle over the Bayes predictor against the
/// noiseless response, with the curvature bound estimated on the same draws.
pub fn prop1_excess_check<R: Rng + ?Sized>(ctx: &OracleContext, n_mc: usize, rng: &mut R) -> Result<ExcessReport> {
    if n_mc < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let h = constant_hessian(&ctx.fstar)?;
    let (x, mask) = sample_masked(ctx, n_mc, rng)?;
    let mut diffs = Vec::with_capacity(n_mc);
    let mut bound = 0.0;
    for i in 0..n_mc {
        let m: Vec<bool> = mask.row(i).to_vec();
        let x_obs = observed_part(x.row(i), &m);
        let y = eval_fstar(&ctx.fstar, x.row(i));
        let b = bayes_predict(ctx, &x_obs, &m)?;
        let c = chained_oracle_predict(ctx, &x_obs, &m)?;
        diffs.push((y - c).powi(2) - (y - b).powi(2));
        let (_, mis) = split_pattern(&m);
        if !mis.is_empty() {
            let cond = ctx.conditional(&x_obs, &m)?;
            let tr = block_trace(&h, &mis, cond.sigma_c.as_array());
            bound += 0.25 * tr * tr;
        }
    }
    let n = n_mc as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();
    let bound = bound / n;
    Ok(ExcessReport {
        mc_excess: mean,
        mc_stderr: stderr,
        bound,
        n: n_mc,
        satisfied: mean <= bound + 3.0 * stderr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectedImputationReport {
    pub rho: f64,
    pub max_deviation: f64,
    pub n_points: usize,
}

/// Standard bivariate normal with correlation `rho`, response `x1² + x2²`,
/// `x2` missing. Imputing `√(ρ²x1² + 1 − ρ²)` makes the complete-data
/// response equal to the Bayes predictor `x1² + E[x2² | x1]`; the report
/// holds the largest discrepancy over `x1 ∈ [−4, 4]` in steps of 1e-3.
pub fn corrected_imputation_2d(rho: f64) -> CorrectedImputationReport {
    let n_points = 8001;
    let mut max_deviation = 0.0f64;
    for k in 0..n_points {
        let x1 = -4.0 + k as f64 * 1e-3;
        let phi = (rho * rho * x1 * x1 + 1.0 - rho * rho).sqrt();
        let chained = x1 * x1 + phi * phi;
        let cond_mean = rho * x1;
        let cond_var = 1.0 - rho * rho;
        let bayes = x1 * x1 + cond_mean * cond_mean + cond_var;
        max_deviation = max_deviation.max((chained - bayes).abs());
    }
    CorrectedImputationReport {
        rho,
        max_deviation,
        n_points,
    }
}

/// The cubic response `x2³ − 3x2`.
pub fn cubic_response(x2: f64) -> f64 {
    x2 * x2 * x2 - 3.0 * x2
}

/// Bayes predictor when `x2 = x1 + ε`, `ε ~ N(0, σ²)`, is missing.
pub fn cubic_bayes(x1: f64, sigma_sq: f64) -> f64 {
    x1 * x1 * x1 + 3.0 * x1 * (sigma_sq - 1.0)
}

/// Largest real root of `x³ − 3x = b`, found by bisection. As a function of
/// `b` it jumps from 1 to −2 at `b = −2`.
pub fn largest_cubic_root(b: f64) -> f64 {
    let reach = 2.0 + b.abs().cbrt();
    let (mut lo, mut hi) = if b >= -2.0 { (1.0, reach) } else { (-reach, -2.0) };
    for _ in 0..200 {
        let mid = lo + (hi - lo) / 2.0;
        if mid == lo || mid == hi {
            break;
        }
        if cubic_response(mid) < b {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + (hi - lo) / 2.0
}

/// Continuous piecewise-linear map with linear extrapolation past the end knots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiecewiseLinear {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseLinear {
    fn segment(&self, x: f64) -> usize {
        let k = self.knots.len();
        self.knots.partition_point(|&t| t <= x).saturating_sub(1).min(k - 2)
    }

    fn eval_on(&self, s: usize, x: f64) -> f64 {
        let (t0, t1) = (self.knots[s], self.knots[s + 1]);
        let w = (x - t0) / (t1 - t0);
        self.values[s] + w * (self.values[s + 1] - self.values[s])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_on(self.segment(x), x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesMcPoint {
    pub x1: f64,
    pub analytic: f64,
    pub mc: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub sigma_sq: f64,
    pub knots: usize,
    pub bayes_vs_mc: Vec<BayesMcPoint>,
    pub bayes_risk: f64,
    pub best_continuous_chain_risk: f64,
    /// `E[(f*(x1, Φ(x1)) − Bayes(x1))²]` for the fitted continuous `Φ`.
    pub margin: f64,
    pub margin_stderr: f64,
    /// Same quantity for the discontinuous largest-root imputation.
    pub lookup_margin: f64,
    pub lookup_stderr: f64,
    pub imputation: PiecewiseLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CounterexampleConfig {
    pub n_fit: usize,
    pub n_eval: usize,
    pub n_mc: usize,
    pub max_sweeps: usize,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        CounterexampleConfig {
            n_fit: 20_000,
            n_eval: 100_000,
            n_mc: 200_000,
            max_sweeps: 30,
        }
    }
}

fn inverse_normal_cdf(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = lo + (hi - lo) / 2.0;
        if std_normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + (hi - lo) / 2.0
}

/// Fits knot values by cyclic coordinate descent on
/// `Σ (f*(x1, Φ(x1)) − Bayes(x1))²`, which differs from the squared risk
/// of `f*∘Φ` by a constant.
fn fit_continuous_imputation(x1: &[f64], sigma_sq: f64, knots: usize, max_sweeps: usize) -> PiecewiseLinear {
    let t: Vec<f64> = (0..knots)
        .map(|k| inverse_normal_cdf((k as f64 + 0.5) / knots as f64))
        .collect();
    let values = t.iter().map(|&v| largest_cubic_root(cubic_bayes(v, sigma_sq))).collect();
    let mut phi = PiecewiseLinear { knots: t, values };
    let target: Vec<f64> = x1.iter().map(|&v| cubic_bayes(v, sigma_sq)).collect();
    let mut by_segment = vec![Vec::new(); knots - 1];
    for (i, &v) in x1.iter().enumerate() {
        by_segment[phi.segment(v)].push(i);
    }
    let local_loss = |phi: &PiecewiseLinear, k: usize| -> f64 {
        let lo = k.saturating_sub(1);
        let hi = k.min(knots - 2);
        (lo..=hi)
            .flat_map(|s| by_segment[s].iter().map(move |&i| (s, i)))
            .map(|(s, i)| (cubic_response(phi.eval_on(s, x1[i])) - target[i]).powi(2))
            .sum()
    };
    let total = |phi: &PiecewiseLinear| -> f64 {
        (0..knots - 1)
            .flat_map(|s| by_segment[s].iter().map(move |&i| (s, i)))
            .map(|(s, i)| (cubic_response(phi.eval_on(s, x1[i])) - target[i]).powi(2))
            .sum()
    };
    let mut current = total(&phi);
    for _ in 0..max_sweeps {
        for k in 0..knots {
            let centre = phi.values[k];
            let mut best = (local_loss(&phi, k), centre);
            for (half_width, step) in [(1.0, 5e-3), (5e-3, 5e-5)] {
                let origin = best.1;
                let steps = (half_width / step) as i64;
                for s in -steps..=steps {
                    phi.values[k] = origin + s as f64 * step;
                    let loss = local_loss(&phi, k);
                    if loss < best.0 {
                        best = (loss, phi.values[k]);
                    }
                }
            }
            phi.values[k] = best.1;
        }
        let next = total(&phi);
        let done = current - next <= 1e-9 * current.max(1e-300);
        current = next;
        if done {
            break;
        }
    }
    phi
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `x1 ~ N(0, 1)`, `x2 = x1 + ε` with `ε ~ N(0, σ²)`, response `x2³ − 3x2`,
/// `x2` missing. The Bayes predictor is increasing while the response along
/// any continuous path through the band `x2 ∈ [−1, 1]` decreases, so the best
/// continuous imputation with finitely many knots keeps a positive gap.
pub fn counterexample_a8<R: Rng + ?Sized>(
    sigma_sq: f64,
    knots: usize,
    cfg: &CounterexampleConfig,
    rng: &mut R,
) -> Result<CounterexampleReport> {
    if !(sigma_sq > 1.0) {
        return Err(Error::InvalidArgument(format!("noise variance must exceed 1, got {sigma_sq}")));
    }
    if knots < 2 || cfg.n_fit < 2 || cfg.n_eval < 2 || cfg.n_mc < 2 {
        return Err(Error::InvalidArgument("need at least two knots and two draws".into()));
    }
    let noise = Normal::new(0.0, sigma_sq.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let bayes_vs_mc = [-2.0, 0.0, 2.0]
        .iter()
        .map(|&x1| {
            let draws: Vec<f64> = (0..cfg.n_mc).map(|_| cubic_response(x1 + noise.sample(rng))).collect();
            let (mc, stderr) = mean_and_stderr(&draws);
            BayesMcPoint {
                x1,
                analytic: cubic_bayes(x1, sigma_sq),
                mc,
                stderr,
            }
        })
        .collect();

    let fit_x: Vec<f64> = (0..cfg.n_fit).map(|_| rng.sample(StandardNormal)).collect();
    let phi = fit_continuous_imputation(&fit_x, sigma_sq, knots, cfg.max_sweeps);

    let mut gaps = Vec::with_capacity(cfg.n_eval);
    let mut lookup_gaps = Vec::with_capacity(cfg.n_eval);
    let (mut bayes_risk, mut chain_risk) = (0.0, 0.0);
    for _ in 0..cfg.n_eval {
        let x1: f64 = rng.sample(StandardNormal);
        let y = cubic_response(x1 + noise.sample(rng));
        let bayes = cubic_bayes(x1, sigma_sq);
        let chained = cubic_response(phi.eval(x1));
        let lookup = cubic_response(largest_cubic_root(bayes));
        gaps.push((chained - bayes).powi(2));
        lookup_gaps.push((lookup - bayes).powi(2));
        bayes_risk += (y - bayes).powi(2);
        chain_risk += (y - chained).powi(2);
    }
    let (margin, margin_stderr) = mean_and_stderr(&gaps);
    let (lookup_margin, lookup_stderr) = mean_and_stderr(&lookup_gaps);
    let n = cfg.n_eval as f64;
    Ok(CounterexampleReport {
        sigma_sq,
        knots,
        bayes_vs_mc,
        bayes_risk: bayes_risk / n,
        best_continuous_chain_risk: chain_risk / n,
        margin,
        margin_stderr,
        lookup_margin,
        lookup_stderr,
        imputation: phi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingLabel {
    pub fstar: FstarKind,
    pub mechanism: MechanismKind,
    pub corr: CorrLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaSummary {
    pub setting: SettingLabel,
    pub probes: usize,
    pub violations: usize,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcessSummary {
    pub setting: SettingLabel,
    pub report: ExcessReport,
}

/// Everything `missbench verify` runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub lemma1: Vec<LemmaSummary>,
    pub prop1: Vec<ExcessSummary>,
    pub corrected_2d: Vec<CorrectedImputationReport>,
    pub counterexample: Vec<CounterexampleReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerificationConfig {
    pub d: usize,
    pub lemma_probes: usize,
    pub excess_draws: usize,
    pub knot_counts: [usize; 3],
    pub counterexample: CounterexampleConfig,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            d: 10,
            lemma_probes: 1000,
            excess_draws: 20_000,
            knot_counts: [10, 50, 200],
            counterexample: CounterexampleConfig::default(),
        }
    }
}

pub fn run_verification(seed: u64, cfg: &VerificationConfig) -> Result<VerificationReport> {
    let mut lemma1 = Vec::new();
    let mut prop1 = Vec::new();
    for fstar in [FstarKind::Bowl, FstarKind::Linear] {
        for mechanism in MechanismKind::ALL.iter().copied() {
            for corr in CorrLevel::ALL.iter().copied() {
                let spec = DataSpec::new(cfg.d, corr, fstar, mechanism, seed);
                let ctx = OracleContext::from_spec(&spec)?;
                let label = SettingLabel { fstar, mechanism, corr };
                let tag = format!("{fstar}-{mechanism}-{corr}");
                let report = lemma1_check(&ctx, cfg.lemma_probes, &mut derived(seed, &format!("lemma1-{tag}")))?;
                lemma1.push(LemmaSummary {
                    setting: label.clone(),
                    probes: report.probes.len(),
                    violations: report.violations,
                    max_abs_error: report.probes.iter().fold(0.0, |m, p| m.max((p.gap - p.lower).abs())),
                });
                let report = prop1_excess_check(&ctx, cfg.excess_draws, &mut derived(seed, &format!("prop1-{tag}")))?;
                prop1.push(ExcessSummary { setting: label, report });
            }
        }
    }
    let corrected_2d = [0.0, 0.3, 0.5, 0.9, 1.0].into_iter().map(corrected_imputation_2d).collect();
    let counterexample = cfg
        .knot_counts
        .iter()
        .map(|&k| counterexample_a8(2.0, k, &cfg.counterexample, &mut derived(seed, &format!("cubic-{k}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationReport {
        seed,
        lemma1,
        prop1,
        corrected_2d,
        counterexample,
    })
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.lemma1.iter().all(|l| l.violations == 0)
            && self.prop1.iter().all(|p| p.report.satisfied)
            && self.corrected_2d.iter().all(|c| c.max_deviation < 1e-12)
            && self
                .counterexample
                .iter()
                .all(|c| c.margin > 5.0 * c.margin_stderr && c.lookup_margin <= c.lookup_stderr.max(1e-12))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "\ncurvature bracket on bayes - chained");
        let _ = writeln!(s, "{:<8} {:<5} {:<5} {:>7} {:>10} {:>12}", "fstar", "mech", "corr", "probes", "violations", "max |error|");
        for l in &self.lemma1 {
            let _ = writeln!(
                s,
                "{:<8} {:<5} {:<5} {:>7} {:>10} {:>12.3e}",
                l.setting.fstar.as_str(), l.setting.mechanism.as_str(), l.setting.corr.as_str(), l.probes, l.violations, l.max_abs_error
            );
        }
        let _ = writeln!(s, "\nexcess risk of the chained oracle");
        let _ = writeln!(s, "{:<8} {:<5} {:<5} {:>12} {:>10} {:>12} {:>4}", "fstar", "mech", "corr", "excess", "stderr", "bound", "ok");
        for p in &self.prop1 {
            let r = &p.report;
            let _ = writeln!(
                s,
                "{:<8} {:<5} {:<5} {:>12.5} {:>10.2e} {:>12.5} {:>4}",
                p.setting.fstar.as_str(), p.setting.mechanism.as_str(), p.setting.corr.as_str(), r.mc_excess, r.mc_stderr, r.bound, r.satisfied
            );
        }
        let _ = writeln!(s, "\ncorrected 2-D imputation");
        for c in &self.corrected_2d {
            let _ = writeln!(s, "rho {:<4} max deviation {:.3e}", c.rho, c.max_deviation);
        }
        let _ = writeln!(s, "\ncubic response, no continuous corrected imputation");
        if let Some(c) = self.counterexample.first() {
            for p in &c.bayes_vs_mc {
                let _ = writeln!(
                    s,
                    "x1 {:>5}: analytic bayes {:>10.4}, monte carlo {:>10.4} ± {:.4}",
                    p.x1, p.analytic, p.mc, p.stderr
                );
            }
        }
        let _ = writeln!(s, "{:>6} {:>12} {:>10} {:>12} {:>12} {:>12}", "knots", "margin", "stderr", "lookup", "bayes risk", "chain risk");
        for c in &self.counterexample {
            let _ = writeln!(
                s,
                "{:>6} {:>12.5} {:>10.2e} {:>12.2e} {:>12.4} {:>12.4}",
                c.knots, c.margin, c.margin_stderr, c.lookup_margin, c.bayes_risk, c.best_continuous_chain_risk
            );
        }
        let _ = writeln!(s, "\n{}", if self.passed() { "all checks passed" } else { "SOME CHECKS FAILED" });
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("verify.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("verify.txt"), self.to_text())?;
        Ok(())
    }
}
