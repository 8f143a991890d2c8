//! Sparse support recovery for the linear idealisation `y = Z beta* + eps`,
//! where `Z` holds one cluster-aggregated feature per bag and column.
//!
//! Solves `min (1/2M)||y - Z beta||^2 + gamma ||beta||_1` by (accelerated)
//! proximal gradient and measures how often the support and signs of
//! `beta*` are recovered as the number of bags `M` grows.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, fmt_f64};
use crate::error::{Error, Result};
use crate::optim::soft_threshold_scalar;
use crate::seed;

/// Magnitudes below this count as zero when comparing supports.
pub const SUPPORT_TOL: f64 = 1e-8;

/// Largest `K` for which `re_constant` enumerates supports.
pub const RE_MAX_K: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryProblem {
    /// `M × K` design.
    pub z: Array2<f64>,
    pub y: Array1<f64>,
    pub beta_star: Array1<f64>,
    pub sigma: f64,
    pub beta_min: f64,
}

impl RecoveryProblem {
    pub fn sparsity(&self) -> usize {
        self.beta_star.iter().filter(|b| **b != 0.0).count()
    }
}

/// Gaussian design with columns rescaled to norm `sqrt(M)`, an `s`-sparse
/// `beta*` with magnitudes in `[beta_min, 2 beta_min]` and random signs, and
/// `y = Z beta* + N(0, sigma^2 I)`.
pub fn gen_linear_problem(
    k: usize,
    s: usize,
    m: usize,
    sigma: f64,
    beta_min: f64,
    seed: u64,
) -> Result<RecoveryProblem> {
    if s == 0 || s > k || m == 0 {
        return Err(Error::config(format!(
            "need 1 <= s <= K and M >= 1 (K={k}, s={s}, M={m})"
        )));
    }
    if !(sigma >= 0.0) || !(beta_min > 0.0) {
        return Err(Error::config("sigma must be >= 0 and beta_min > 0"));
    }
    let mut rng = seed::rng(seed);
    let mut z: Array2<f64> = Array2::from_shape_simple_fn((m, k), || StandardNormal.sample(&mut rng));
    let target = (m as f64).sqrt();
    for mut col in z.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|x| x * target / norm);
    }
    let mut beta_star = Array1::zeros(k);
    for j in index::sample(&mut rng, k, s) {
        let mag = rng.random_range(beta_min..=2.0 * beta_min);
        beta_star[j] = if rng.random::<bool>() { mag } else { -mag };
    }
    let mut y = z.dot(&beta_star);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma > 0");
        y.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    Ok(RecoveryProblem {
        z,
        y,
        beta_star,
        sigma,
        beta_min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoOptions {
    pub max_iter: usize,
    /// Stop when the relative objective change drops below this.
    pub tol: f64,
    pub accelerated: bool,
    /// Keep the objective after every iteration.
    pub record_trace: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            max_iter: 100_000,
            tol: 1e-14,
            accelerated: true,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub beta_hat: Array1<f64>,
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    /// Objective at the start and after every iteration, when requested.
    pub objective_trace: Vec<f64>,
    /// Step constant `lambda_max(Z^T Z)/M` used by the solver.
    pub lipschitz: f64,
}

/// `(1/2M)||y - Z beta||^2 + gamma ||beta||_1`
pub fn lasso_objective(z: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, beta: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let m = z.nrows() as f64;
    let r = &y - &z.dot(&beta);
    r.dot(&r) / (2.0 * m) + gamma * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
/// Rayleigh-quotient stopping rule.
pub fn power_iteration(g: &Array2<f64>, rel_tol: f64, max_iter: usize) -> f64 {
    let k = g.nrows();
    let mut v: Array1<f64> = (0..k).map(|i| 1.0 + i as f64 / (k as f64 + 1.0)).collect();
    v /= v.dot(&v).sqrt();
    let mut lambda = v.dot(&g.dot(&v));
    for _ in 0..max_iter {
        let w = g.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = v.dot(&g.dot(&v));
        if (next - lambda).abs() <= rel_tol * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// ISTA, or FISTA when `opts.accelerated`, from `beta = 0`.
pub fn lasso_ista(
    z: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    gamma: f64,
    opts: &LassoOptions,
) -> Result<LassoSolution> {
    let (m, k) = z.dim();
    if y.len() != m {
        return Err(Error::DimensionMismatch {
            context: "lasso response".into(),
            expected: m,
            found: y.len(),
        });
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::config(format!("gamma must be non-negative, got {gamma}")));
    }
    if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso inputs".into()));
    }
    let mf = m as f64;
    let gram = z.t().dot(&z) / mf;
    let corr = z.t().dot(&y) / mf;
    let lipschitz = power_iteration(&gram, 1e-10, 10_000);

    let mut beta = Array1::<f64>::zeros(k);
    let mut objective = lasso_objective(z, y, beta.view(), gamma);
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(objective);
    }
    if lipschitz == 0.0 {
        return Ok(LassoSolution {
            beta_hat: beta,
            iterations: 0,
            final_objective: objective,
            converged: true,
            objective_trace: trace,
            lipschitz,
        });
    }
    let step = 1.0 / lipschitz;
    let threshold = gamma * step;
    let mut momentum_point = beta.clone();
    let mut t = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let base = if opts.accelerated { &momentum_point } else { &beta };
        let grad = gram.dot(base) - &corr;
        let next: Array1<f64> = base
            .iter()
            .zip(grad.iter())
            .map(|(b, g)| soft_threshold_scalar(b - step * g, threshold))
            .collect();
        let next_objective = lasso_objective(z, y, next.view(), gamma);
        // FISTA's objective is not monotone and can flatten out transiently,
        // so a small prox step is required as well.
        let step_size = next
            .iter()
            .zip(base.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let magnitude = next.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if opts.record_trace {
            trace.push(next_objective);
        }
        if opts.accelerated {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let w = (t - 1.0) / t_next;
            momentum_point = &next + &((&next - &beta) * w);
            t = t_next;
        }
        let unchanged = next == beta;
        let change = (next_objective - objective).abs();
        let scale = objective.abs().max(next_objective.abs());
        beta = next;
        objective = next_objective;
        if unchanged || (change <= opts.tol * scale && step_size <= opts.tol.sqrt() * magnitude) {
            converged = true;
            break;
        }
    }
    Ok(LassoSolution {
        beta_hat: beta,
        iterations,
        final_objective: objective,
        converged,
        objective_trace: trace,
        lipschitz,
    })
}

/// Largest violation of the Lasso optimality conditions at `beta`:
/// `max_k dist(-(1/M) Z_k^T (Z beta - y), gamma * d|beta_k|)`.
pub fn kkt_residual(z: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, beta: ArrayView1<'_, f64>, gamma: f64) -> f64 {
    let m = z.nrows() as f64;
    let neg_grad = z.t().dot(&(&y - &z.dot(&beta))) / m;
    neg_grad
        .iter()
        .zip(beta.iter())
        .map(|(&g, &b)| {
            if b > 0.0 {
                (g - gamma).abs()
            } else if b < 0.0 {
                (g + gamma).abs()
            } else {
                (g.abs() - gamma).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Mutual coherence: largest absolute cosine between distinct columns.
/// Zero columns are treated as orthogonal to everything.
pub fn coherence(z: ArrayView2<'_, f64>) -> Result<f64> {
    let k = z.ncols();
    if k < 2 {
        return Err(Error::config("coherence needs at least two columns"));
    }
    let norms: Vec<f64> = z.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    let mut mu = 0.0f64;
    for a in 0..k {
        for b in (a + 1)..k {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let cos = z.column(a).dot(&z.column(b)) / (norms[a] * norms[b]);
            mu = mu.max(cos.abs());
        }
    }
    Ok(mu.min(1.0))
}

/// Restricted eigenvalue over `s`-column supports:
/// `min_{|S|=s} lambda_min(Z_S^T Z_S / M)`, by exhaustive enumeration.
pub fn re_constant(z: ArrayView2<'_, f64>, s: usize) -> Result<f64> {
    let (m, k) = z.dim();
    if s == 0 || s > k {
        return Err(Error::config(format!("support size {s} must lie in 1..={k}")));
    }
    if k > RE_MAX_K {
        return Err(Error::config(format!(
            "K = {k} is too large to enumerate supports (limit {RE_MAX_K}); sub-sample columns first"
        )));
    }
    let gram = z.t().dot(&z) / m as f64;
    let mut support: Vec<usize> = (0..s).collect();
    let mut kappa = f64::INFINITY;
    loop {
        let sub = DMatrix::from_fn(s, s, |i, j| gram[[support[i], support[j]]]);
        let lmin = SymmetricEigen::new(sub)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        kappa = kappa.min(lmin);
        // next combination in lexicographic order
        let Some(i) = (0..s).rev().find(|&i| support[i] < k - s + i) else {
            break;
        };
        support[i] += 1;
        for j in i + 1..s {
            support[j] = support[j - 1] + 1;
        }
    }
    Ok(kappa.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// Same support and the same sign on every coordinate.
    #[default]
    SignConsistent,
    /// Same support only.
    SetOnly,
}

fn sign_of(v: f64) -> i8 {
    if v.abs() < SUPPORT_TOL {
        0
    } else if v > 0.0 {
        1
    } else {
        -1
    }
}

pub fn support_recovered(beta_hat: ArrayView1<'_, f64>, beta_star: ArrayView1<'_, f64>, mode: SupportMode) -> bool {
    assert_eq!(beta_hat.len(), beta_star.len(), "coefficient vectors differ in length");
    beta_hat.iter().zip(beta_star.iter()).all(|(&h, &t)| match mode {
        SupportMode::SignConsistent => sign_of(h) == sign_of(t),
        SupportMode::SetOnly => (sign_of(h) == 0) == (sign_of(t) == 0),
    })
}

/// `2 sigma sqrt(ln K / M)`
pub fn default_gamma(sigma: f64, k: usize, m: usize) -> f64 {
    2.0 * sigma * ((k as f64).ln() / m as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub k: usize,
    pub s: usize,
    pub m_grid: Vec<usize>,
    pub trials: usize,
    pub sigma: f64,
    pub beta_min: f64,
    /// Fixed `gamma` instead of `2 sigma sqrt(ln K / M)`.
    pub gamma: Option<f64>,
    pub support_mode: SupportMode,
    pub solver: LassoOptions,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            k: 64,
            s: 4,
            m_grid: vec![8, 16, 24, 32, 48, 64, 80, 96, 112, 134, 160, 200, 256],
            trials: 50,
            sigma: 0.05,
            beta_min: 1.0,
            gamma: None,
            support_mode: SupportMode::SignConsistent,
            solver: LassoOptions {
                max_iter: 20_000,
                tol: 1e-10,
                accelerated: true,
                record_trace: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub s: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_l2_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTable {
    pub rows: Vec<PhaseRow>,
}

impl PhaseTable {
    pub fn row(&self, m: usize) -> Option<&PhaseRow> {
        self.rows.iter().find(|r| r.m == m)
    }

    /// `M,s,K,sigma,gamma,trials,success_rate,mean_l2_error`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.rows.iter().map(|r| {
            vec![
                r.m.to_string(),
                r.s.to_string(),
                r.k.to_string(),
                fmt_f64(r.sigma),
                fmt_f64(r.gamma),
                r.trials.to_string(),
                fmt_f64(r.success_rate),
                fmt_f64(r.mean_l2_error),
            ]
        });
        artifact::write_csv(
            path,
            &[
                "M",
                "s",
                "K",
                "sigma",
                "gamma",
                "trials",
                "success_rate",
                "mean_l2_error",
            ],
            rows,
        )
    }
}

/// Seed of trial `trial` at grid point `m`.
pub fn trial_seed(seed: u64, m: usize, trial: usize) -> u64 {
    seed::derive_indexed(seed, &format!("phase-M{m}"), trial as u64)
}

/// Success rate and mean l2 error at one grid point.
pub fn phase_point(cfg: &PhaseConfig, m: usize, seed: u64) -> Result<PhaseRow> {
    let gamma = cfg.gamma.unwrap_or_else(|| default_gamma(cfg.sigma, cfg.k, m));
    let outcomes: Vec<Result<(bool, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let p = gen_linear_problem(cfg.k, cfg.s, m, cfg.sigma, cfg.beta_min, trial_seed(seed, m, t))?;
            let sol = lasso_ista(p.z.view(), p.y.view(), gamma, &cfg.solver)?;
            let err = (&sol.beta_hat - &p.beta_star).mapv(|x| x * x).sum().sqrt();
            Ok((
                support_recovered(sol.beta_hat.view(), p.beta_star.view(), cfg.support_mode),
                err,
            ))
        })
        .collect();
    let mut successes = 0usize;
    let mut err_sum = 0.0;
    for o in outcomes {
        let (ok, err) = o?;
        successes += usize::from(ok);
        err_sum += err;
    }
    let n = cfg.trials.max(1) as f64;
    Ok(PhaseRow {
        m,
        s: cfg.s,
        k: cfg.k,
        sigma: cfg.sigma,
        gamma,
        trials: cfg.trials,
        success_rate: successes as f64 / n,
        mean_l2_error: err_sum / n,
    })
}

pub fn phase_transition(cfg: &PhaseConfig, seed: u64) -> Result<PhaseTable> {
    if cfg.m_grid.is_empty() || cfg.trials == 0 {
        return Err(Error::config(
            "phase transition needs a non-empty M grid and trials > 0",
        ));
    }
    let rows = cfg
        .m_grid
        .par_iter()
        .map(|&m| phase_point(cfg, m, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseTable { rows })
}

/// First grid `M` (ascending) reaching `target` success, scanning lazily.
pub fn minimal_m(cfg: &PhaseConfig, target: f64, seed: u64) -> Result<Option<usize>> {
    let mut grid = cfg.m_grid.clone();
    grid.sort_unstable();
    for m in grid {
        if phase_point(cfg, m, seed)?.success_rate >= target {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ~ a x + b`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::config("linear fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::config("linear fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub s: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub s_log_k: f64,
    pub min_m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub target: f64,
    pub points: Vec<ScalingPoint>,
    pub fit: Option<LinearFit>,
}

/// Minimal `M` reaching `target` success for every `(s, K)` pair, and the
/// regression of that `M` on `s ln K`.
pub fn scaling_law(base: &PhaseConfig, pairs: &[(usize, usize)], target: f64, seed: u64) -> Result<ScalingReport> {
    let points = pairs
        .par_iter()
        .map(|&(s, k)| {
            let cfg = PhaseConfig { s, k, ..base.clone() };
            let pair_seed = seed::derive(seed, &format!("scaling-s{s}-K{k}"));
            Ok(ScalingPoint {
                s,
                k,
                s_log_k: s as f64 * (k as f64).ln(),
                min_m: minimal_m(&cfg, target, pair_seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter_map(|p| p.min_m.map(|m| (p.s_log_k, m as f64)))
        .unzip();
    let fit = linear_fit(&xs, &ys).ok();
    Ok(ScalingReport { target, points, fit })
}

/// Least-squares `C'` in `mean_l2_error ~ C' sigma sqrt(s ln K / M)` over the
/// rows with success rate at least `min_success`.
pub fn fit_error_constant(table: &PhaseTable, min_success: f64) -> Option<f64> {
    let (num, den) = table
        .rows
        .iter()
        .filter(|r| r.success_rate >= min_success && r.sigma > 0.0)
        .map(|r| {
            let x = r.sigma * (r.s as f64 * (r.k as f64).ln() / r.m as f64).sqrt();
            (r.mean_l2_error * x, x * x)
        })
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mu: f64,
    pub kappa_s: BTreeMap<usize, f64>,
}

pub fn design_diagnostics(z: ArrayView2<'_, f64>, support_sizes: &[usize]) -> Result<Diagnostics> {
    let mut kappa_s = BTreeMap::new();
    for &s in support_sizes {
        kappa_s.insert(s, re_constant(z, s)?);
    }
    Ok(Diagnostics {
        mu: coherence(z)?,
        kappa_s,
    })
}
