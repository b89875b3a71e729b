//! Two-stage partially penalized collaborative estimation.
//!
//! The surrogate loss is the master's empirical loss plus a linear gradient
//! shift, `L̃(β; a) = L̂₁(β) + ⟨∇L̂(a) − ∇L̂₁(a), β⟩`, whose gradient matches
//! the pooled gradient exactly at the anchor `a`. Stage I iterates an
//! ℓ1-penalized minimization of the surrogate (nuisance block only); Stage II
//! iterates a reweighted ℓ1 step with the linear constraint `Cθ = t` active,
//! the weights coming from a folded-concave penalty derivative at the
//! previous iterate. Each outer iteration refreshes the anchor with exactly
//! one gradient round.
//!
//! The inner solver is proximal gradient with backtracking and a
//! function-value restart of Nesterov momentum, so the penalized surrogate
//! objective never increases across accepted steps. The constraint is
//! eliminated by the null-space parameterization θ = θ₀ + Z·u, which keeps
//! the prox separable and satisfies Cθ = t exactly at every iterate.

use ndarray::{Array1, Array2};

use crate::cluster::{Cluster, CommStats};
use crate::error::{Error, Result};
use crate::inference::LinearHypothesis;
use crate::model::PartitionedParam;
use crate::numerics::null_space_affine;
use crate::penalty::{self, PenaltyKind, PenaltySpec};

/// Inner/outer loop controls for both stages.
#[derive(Debug, Clone)]
pub struct StageConfig {
    /// Penalty levels to scan with HBIC, strictly decreasing. `None` derives
    /// a 30-point log grid from λ_max of the master fit down to 0.01·λ_max.
    pub lambda_grid: Option<Vec<f64>>,
    /// Outer iteration cap per stage.
    pub max_outer: usize,
    /// Outer stopping rule: ‖β_new − β_old‖₂ below this ends the stage.
    pub outer_tol: f64,
    /// Inner proximal-gradient iteration cap.
    pub inner_max: usize,
    /// Inner stopping rule on the relative step norm.
    pub inner_tol: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lambda_grid: None,
            max_outer: 10,
            outer_tol: 1e-3,
            inner_max: 5000,
            inner_tol: 1e-6,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return Err(Error::InvalidConfig("lambda grid must be non-empty".into()));
            }
            if !grid.iter().all(|&l| l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig("lambda grid entries must be positive".into()));
            }
            if !grid.windows(2).all(|w| w[0] > w[1]) {
                return Err(Error::InvalidConfig(
                    "lambda grid must be strictly decreasing".into(),
                ));
            }
        }
        if self.outer_tol <= 0.0 || self.inner_tol <= 0.0 {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.inner_max == 0 {
            return Err(Error::InvalidConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// Output of the two-stage procedure.
#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub beta_hat: PartitionedParam,
    /// Global coordinates of the exactly nonzero nuisance entries, sorted.
    pub support: Vec<usize>,
    /// Anchors broadcast per outer iteration, Stage I then Stage II.
    pub anchor_trace: Vec<Array1<f64>>,
    /// The aggregated global gradient at each anchor.
    pub anchor_gradients: Vec<Array1<f64>>,
    /// Index into `anchor_trace` where Stage II begins.
    pub stage2_start: usize,
    /// Communication used by the solve.
    pub comm: CommStats,
    /// HBIC-selected penalty levels (last Stage I choice, Stage II choice).
    pub lambda_chosen: (f64, f64),
    /// False when either stage hit `max_outer` without meeting `outer_tol`.
    pub converged: bool,
    /// Outer iterations actually run per stage.
    pub outer_iterations: (usize, usize),
}

/// Gradient of the surrogate collaborative loss,
/// `∇L̃(β; a) = ∇L̂₁(β) + ∇L̂(a) − ∇L̂₁(a)`.
///
/// Computed as `g_anchor + (∇L̂₁(β) − ∇L̂₁(a))` so it returns
/// `g_global_at_anchor` exactly when β equals the anchor.
pub fn surrogate_gradient(
    cluster: &Cluster,
    beta: &Array1<f64>,
    anchor: &Array1<f64>,
    g_global_at_anchor: &Array1<f64>,
) -> Result<Array1<f64>> {
    let p = cluster.p();
    if beta.len() != p || anchor.len() != p || g_global_at_anchor.len() != p {
        return Err(Error::DimensionMismatch(
            "surrogate gradient inputs must all have the cluster dimension".into(),
        ));
    }
    let mut g = cluster.master_gradient(beta)?;
    let ga = cluster.master_gradient(anchor)?;
    g -= &ga;
    g += g_global_at_anchor;
    Ok(g)
}

/// Internal fixed data for one penalized surrogate solve.
struct SurrogateProblem<'a> {
    cluster: &'a Cluster,
    /// ∇L̂(anchor) − ∇L̂₁(anchor).
    shift: Array1<f64>,
    target_idx: &'a [usize],
    nuisance_idx: Vec<usize>,
    weights: &'a Array1<f64>,
    /// (θ₀, Z) when the constraint is active.
    constraint: Option<(Array1<f64>, Array2<f64>)>,
}

impl<'a> SurrogateProblem<'a> {
    fn loss(&self, beta: &Array1<f64>) -> Result<f64> {
        let base = self.cluster.master_loss(beta)?;
        Ok(base + self.shift.dot(beta))
    }

    fn grad(&self, beta: &Array1<f64>) -> Result<Array1<f64>> {
        let mut g = self.cluster.master_gradient(beta)?;
        g += &self.shift;
        Ok(g)
    }

    fn penalty(&self, beta: &Array1<f64>) -> f64 {
        let mut acc = 0.0;
        for (j, &i) in self.nuisance_idx.iter().enumerate() {
            let v = beta[i];
            if v != 0.0 {
                acc += self.weights[j] * v.abs();
            }
        }
        acc
    }
}

/// Complement of `target_idx` in `0..p`, ascending.
fn nuisance_of(target_idx: &[usize], p: usize) -> Vec<usize> {
    let mut is_target = vec![false; p];
    for &i in target_idx {
        is_target[i] = true;
    }
    (0..p).filter(|&i| !is_target[i]).collect()
}

/// Approximately minimizes `L̃(β; anchor) + Σⱼ wⱼ|γⱼ|`, optionally subject to
/// `Cθ = t`.
///
/// Weights apply to the nuisance block in ascending-index order; the target
/// block is never penalized. A weight of `+∞` pins its coordinate to zero,
/// which is how the oracle variant restricts to a known support. Coordinates
/// zeroed by the prox are exactly 0.0 in the returned vector.
#[allow(clippy::too_many_arguments)]
pub fn prox_grad_solve(
    cluster: &Cluster,
    anchor: &Array1<f64>,
    g_anchor: &Array1<f64>,
    target_idx: &[usize],
    weights: &Array1<f64>,
    hypothesis: Option<&LinearHypothesis>,
    warm_start: &Array1<f64>,
    cfg: &StageConfig,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    let p = cluster.p();
    if anchor.len() != p || g_anchor.len() != p || warm_start.len() != p {
        return Err(Error::DimensionMismatch(
            "anchor, gradient, and warm start must have the cluster dimension".into(),
        ));
    }
    let nuisance_idx = nuisance_of(target_idx, p);
    if weights.len() != nuisance_idx.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} nuisance coordinates",
            weights.len(),
            nuisance_idx.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArg("weights must be non-negative".into()));
    }

    let master_grad_anchor = cluster.master_gradient(anchor)?;
    let mut shift = g_anchor.clone();
    shift -= &master_grad_anchor;

    let constraint = match hypothesis {
        Some(hyp) => {
            if hyp.target_idx != target_idx {
                return Err(Error::BadHypothesis(
                    "hypothesis target indices disagree with the solve's target block".into(),
                ));
            }
            Some(null_space_affine(&hyp.c, &hyp.t)?)
        }
        None => None,
    };

    let problem = SurrogateProblem {
        cluster,
        shift,
        target_idx,
        nuisance_idx,
        weights,
        constraint,
    };
    solve_inner(&problem, warm_start, cfg)
}

/// Per-iterate state in the reduced coordinates (u for the constrained
/// target block, γ for the nuisance block), with the full β maintained
/// alongside.
#[derive(Clone)]
struct Iterate {
    beta: Array1<f64>,
    u: Array1<f64>,
}

fn project_feasible(problem: &SurrogateProblem, beta: &Array1<f64>) -> Iterate {
    let mut out = beta.clone();
    // Coordinates with infinite weight start (and stay) at exact zero.
    for (j, &i) in problem.nuisance_idx.iter().enumerate() {
        if problem.weights[j].is_infinite() {
            out[i] = 0.0;
        }
    }
    let u = match &problem.constraint {
        Some((theta0, z)) => {
            let d = problem.target_idx.len();
            let mut diff = Array1::<f64>::zeros(d);
            for (a, &i) in problem.target_idx.iter().enumerate() {
                diff[a] = beta[i] - theta0[a];
            }
            let u = z.t().dot(&diff);
            let theta = theta0 + &z.dot(&u);
            for (a, &i) in problem.target_idx.iter().enumerate() {
                out[i] = theta[a];
            }
            u
        }
        None => Array1::zeros(0),
    };
    Iterate { beta: out, u }
}

/// One prox step of size `eta` from `from`, using gradient `g` at `from`.
fn prox_step(problem: &SurrogateProblem, from: &Iterate, g: &Array1<f64>, eta: f64) -> Iterate {
    let mut beta = from.beta.clone();
    let u = match &problem.constraint {
        Some((theta0, z)) => {
            let d = problem.target_idx.len();
            let mut g_theta = Array1::<f64>::zeros(d);
            for (a, &i) in problem.target_idx.iter().enumerate() {
                g_theta[a] = g[i];
            }
            let gu = z.t().dot(&g_theta);
            let u = &from.u - &(gu * eta);
            let theta = theta0 + &z.dot(&u);
            for (a, &i) in problem.target_idx.iter().enumerate() {
                beta[i] = theta[a];
            }
            u
        }
        None => {
            for &i in problem.target_idx {
                beta[i] -= eta * g[i];
            }
            Array1::zeros(0)
        }
    };
    for (j, &i) in problem.nuisance_idx.iter().enumerate() {
        let v = from.beta[i] - eta * g[i];
        let shrink = v.abs() - eta * problem.weights[j];
        beta[i] = if shrink > 0.0 { v.signum() * shrink } else { 0.0 };
    }
    Iterate { beta, u }
}

fn step_norm_sq(a: &Iterate, b: &Iterate, problem: &SurrogateProblem) -> f64 {
    // ‖Δ‖² in the reduced (u, γ) metric; equals ‖Δβ‖² restricted to the
    // moving blocks because Z has orthonormal columns.
    let mut acc = 0.0;
    if problem.constraint.is_some() {
        for k in 0..a.u.len() {
            let d = a.u[k] - b.u[k];
            acc += d * d;
        }
    } else {
        for &i in problem.target_idx {
            let d = a.beta[i] - b.beta[i];
            acc += d * d;
        }
    }
    for &i in &problem.nuisance_idx {
        let d = a.beta[i] - b.beta[i];
        acc += d * d;
    }
    acc
}

fn inner_dot(g: &Array1<f64>, from: &Iterate, to: &Iterate) -> f64 {
    // ⟨∇L̃(from), to − from⟩ over the full parameter; the constrained target
    // block moves inside the affine set, so the full-space inner product is
    // the reduced-space one.
    let mut acc = 0.0;
    for i in 0..g.len() {
        acc += g[i] * (to.beta[i] - from.beta[i]);
    }
    acc
}

fn solve_inner(problem: &SurrogateProblem, warm_start: &Array1<f64>, cfg: &StageConfig) -> Result<Array1<f64>> {
    // Initial step from the spectral norm of the master design Gram matrix;
    // exact Lipschitz bound for the gaussian family, an upper bound (b″ ≤ ¼)
    // for logistic. Backtracking covers the slack.
    let gram = problem.cluster.master_gram_norm();
    let lip = match problem.cluster.family() {
        crate::model::GlmFamily::Gaussian => gram,
        crate::model::GlmFamily::Logistic => 0.25 * gram,
    }
    .max(1e-12);
    let eta0 = 1.0 / (1.02 * lip);

    let mut cur = project_feasible(problem, warm_start);
    let mut f_loss = problem.loss(&cur.beta)?;
    if !f_loss.is_finite() {
        return Err(Error::NonFinite("surrogate loss at warm start".into()));
    }
    let mut f_cur = f_loss + problem.penalty(&cur.beta);

    let mut look = cur.clone(); // extrapolation point
    let mut look_loss = f_loss;
    let mut t_momentum = 1.0f64;
    let mut eta = eta0;
    let mut momentum_active = false;

    let mut iter = 0usize;
    while iter < cfg.inner_max {
        iter += 1;
        let g = problem.grad(&look.beta)?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("surrogate gradient".into()));
        }

        // Backtrack on the majorization inequality at the lookahead point.
        let mut cand;
        let mut cand_loss;
        loop {
            cand = prox_step(problem, &look, &g, eta);
            cand_loss = problem.loss(&cand.beta)?;
            let dsq = step_norm_sq(&cand, &look, problem);
            let bound = look_loss + inner_dot(&g, &look, &cand) + dsq / (2.0 * eta)
                + 1e-12 * (1.0 + look_loss.abs());
            if cand_loss <= bound {
                break;
            }
            eta *= 0.5;
            if eta < eta0 * 2f64.powi(-60) {
                return Err(Error::Diverged { iter });
            }
        }
        let f_cand = cand_loss + problem.penalty(&cand.beta);

        if f_cand <= f_cur + 1e-12 * (1.0 + f_cur.abs()) {
            // Accept; the objective is non-increasing across accepted steps.
            let dsq = step_norm_sq(&cand, &cur, problem);
            let base = cur
                .beta
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1.0);
            let old = std::mem::replace(&mut cur, cand);
            f_cur = f_cand;
            f_loss = cand_loss;

            if dsq.sqrt() < cfg.inner_tol * base {
                break;
            }

            // Nesterov extrapolation for the next step.
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_momentum * t_momentum).sqrt());
            let coef = (t_momentum - 1.0) / t_next;
            t_momentum = t_next;
            let mut lb = cur.beta.clone();
            for &i in &problem.nuisance_idx {
                lb[i] += coef * (cur.beta[i] - old.beta[i]);
            }
            let lu = match &problem.constraint {
                Some((theta0, z)) => {
                    let u = &cur.u + &((&cur.u - &old.u) * coef);
                    let theta = theta0 + &z.dot(&u);
                    for (a, &i) in problem.target_idx.iter().enumerate() {
                        lb[i] = theta[a];
                    }
                    u
                }
                None => {
                    for &i in problem.target_idx {
                        lb[i] += coef * (cur.beta[i] - old.beta[i]);
                    }
                    Array1::zeros(0)
                }
            };
            look = Iterate { beta: lb, u: lu };
            look_loss = problem.loss(&look.beta)?;
            momentum_active = true;
        } else if momentum_active {
            // Function-value restart: retry as a plain step from the current
            // iterate.
            t_momentum = 1.0;
            look = cur.clone();
            look_loss = f_loss;
            momentum_active = false;
        } else {
            // Plain step failed to decrease: numerically converged.
            break;
        }
    }

    debug_assert!(
        surrogate_anchor_consistency(problem, &cur.beta),
        "constrained iterate left the feasible set"
    );
    Ok(cur.beta)
}

fn surrogate_anchor_consistency(problem: &SurrogateProblem, beta: &Array1<f64>) -> bool {
    match &problem.constraint {
        None => true,
        Some((theta0, z)) => {
            // θ lives in the affine set by construction; verify via residual.
            let d = problem.target_idx.len();
            let mut theta = Array1::<f64>::zeros(d);
            for (a, &i) in problem.target_idx.iter().enumerate() {
                theta[a] = beta[i];
            }
            let diff = &theta - theta0;
            let proj = z.dot(&z.t().dot(&diff));
            diff.iter()
                .zip(proj.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-8 * (1.0 + a.abs()))
        }
    }
}

/// HBIC for a candidate solved against the surrogate loss at `anchor`:
/// `2N·L̃(β) + |supp(γ)|·log(log N)·log p`.
pub fn hbic_score(
    cluster: &Cluster,
    anchor: &Array1<f64>,
    g_anchor: &Array1<f64>,
    target_idx: &[usize],
    beta_candidate: &Array1<f64>,
) -> Result<f64> {
    let p = cluster.p();
    if beta_candidate.len() != p {
        return Err(Error::DimensionMismatch(
            "candidate has wrong dimension".into(),
        ));
    }
    let master_grad_anchor = cluster.master_gradient(anchor)?;
    let mut shift = g_anchor.clone();
    shift -= &master_grad_anchor;
    let n = cluster.n_total();
    let loss = cluster.master_loss(beta_candidate)? + shift.dot(beta_candidate);
    let nuisance = nuisance_of(target_idx, p);
    let df = nuisance.iter().filter(|&&i| beta_candidate[i] != 0.0).count();
    Ok(hbic_value(loss, n, df, p))
}

fn hbic_value(loss: f64, n: usize, df: usize, p: usize) -> f64 {
    let n = n.max(3) as f64;
    2.0 * n * loss + df as f64 * n.ln().ln() * (p as f64).ln()
}

/// Smallest penalty level that zeroes the whole nuisance block of the
/// master's ℓ1 fit, i.e. ‖∇_γ L̂₁(β_{θ-only})‖_∞.
fn master_lambda_max(cluster: &Cluster, target_idx: &[usize], cfg: &StageConfig) -> Result<f64> {
    let p = cluster.p();
    let zeros = Array1::<f64>::zeros(p);
    let g0 = cluster.master_gradient(&zeros)?;
    let nuisance = nuisance_of(target_idx, p);
    let inf_w = Array1::from_elem(nuisance.len(), f64::INFINITY);
    let theta_only = prox_grad_solve(cluster, &zeros, &g0, target_idx, &inf_w, None, &zeros, cfg)?;
    let g = cluster.master_gradient(&theta_only)?;
    let lmax = nuisance.iter().fold(0.0f64, |m, &i| m.max(g[i].abs()));
    Ok(lmax.max(1e-8))
}

fn default_grid(lambda_max: f64) -> Vec<f64> {
    let k = 30usize;
    (0..k)
        .map(|i| lambda_max * (0.01f64).powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Master-only ℓ1-penalized initial estimator tuned by HBIC on the master
/// sample, with the fallback that an empty selected model moves one grid
/// step smaller until the support is non-degenerate.
fn initial_estimator(
    cluster: &Cluster,
    target_idx: &[usize],
    grid: &[f64],
    cfg: &StageConfig,
) -> Result<Array1<f64>> {
    let p = cluster.p();
    let n1 = cluster.master().n();
    let zeros = Array1::<f64>::zeros(p);
    let g0 = cluster.master_gradient(&zeros)?;
    let nuisance = nuisance_of(target_idx, p);

    let mut candidates: Vec<(usize, Array1<f64>, f64)> = Vec::with_capacity(grid.len());
    let mut warm = zeros.clone();
    for (gi, &lam) in grid.iter().enumerate() {
        let w = Array1::from_elem(nuisance.len(), lam);
        let sol = prox_grad_solve(cluster, &zeros, &g0, target_idx, &w, None, &warm, cfg)?;
        let loss = cluster.master_loss(&sol)?;
        let df = nuisance.iter().filter(|&&i| sol[i] != 0.0).count();
        let score = hbic_value(loss, n1, df, p);
        warm = sol.clone();
        candidates.push((gi, sol, score));
    }
    let best = candidates
        .iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
        .unwrap()
        .0;
    let has_support =
        |beta: &Array1<f64>| nuisance.iter().any(|&i| beta[i] != 0.0);
    if has_support(&candidates[best].1) {
        return Ok(candidates[best].1.clone());
    }
    for item in candidates.iter().skip(best + 1) {
        if has_support(&item.1) {
            return Ok(item.1.clone());
        }
    }
    Ok(candidates[best].1.clone())
}

/// Runs Algorithm 1: Stage I (unconstrained ℓ1 on the surrogate, λ chosen by
/// HBIC at every outer iteration), then Stage II (constrained, reweighted by
/// the folded-concave derivative, λ_II chosen once at the first iteration and
/// held fixed). Returns the final estimator with its exact support, the
/// anchor trace, and communication accounting.
pub fn run_two_stage(
    cluster: &mut Cluster,
    hyp: &LinearHypothesis,
    penalty_kind: PenaltyKind,
    cfg: &StageConfig,
) -> Result<TwoStageResult> {
    cfg.validate()?;
    let p = cluster.p();
    for &i in &hyp.target_idx {
        if i >= p {
            return Err(Error::BadHypothesis(format!(
                "target index {i} out of range for p = {p}"
            )));
        }
    }
    let stats_before = cluster.stats();
    let target_idx = hyp.target_idx.clone();
    let nuisance = nuisance_of(&target_idx, p);

    let grid = match &cfg.lambda_grid {
        Some(g) => g.clone(),
        None => default_grid(master_lambda_max(cluster, &target_idx, cfg)?),
    };

    let mut beta = initial_estimator(cluster, &target_idx, &grid, cfg)?;

    let mut anchor_trace: Vec<Array1<f64>> = Vec::new();
    let mut anchor_gradients: Vec<Array1<f64>> = Vec::new();

    // Stage I.
    let mut lambda1 = grid[0];
    let mut converged1 = false;
    let mut k1 = 0usize;
    for _ in 0..cfg.max_outer {
        k1 += 1;
        let g = cluster.global_gradient(&beta)?;
        anchor_trace.push(beta.clone());
        anchor_gradients.push(g.clone());

        let mut warm = beta.clone();
        let mut best: Option<(f64, Array1<f64>, f64)> = None;
        for &lam in &grid {
            let w = Array1::from_elem(nuisance.len(), lam);
            let sol = prox_grad_solve(cluster, &beta, &g, &target_idx, &w, None, &warm, cfg)?;
            let score = hbic_score(cluster, &beta, &g, &target_idx, &sol)?;
            warm = sol.clone();
            match &best {
                Some((_, _, s)) if *s <= score => {}
                _ => best = Some((lam, sol, score)),
            }
        }
        let (lam, next, _) = best.unwrap();
        lambda1 = lam;
        let delta = (&next - &beta).iter().map(|v| v * v).sum::<f64>().sqrt();
        beta = next;
        if delta < cfg.outer_tol {
            converged1 = true;
            break;
        }
    }

    // Stage II.
    let stage2_start = anchor_trace.len();
    let mut lambda2 = None;
    let mut converged2 = false;
    let mut k2 = 0usize;
    for outer in 0..cfg.max_outer {
        k2 += 1;
        let g = cluster.global_gradient(&beta)?;
        anchor_trace.push(beta.clone());
        anchor_gradients.push(g.clone());

        let gamma_abs: Vec<f64> = nuisance.iter().map(|&i| beta[i].abs()).collect();
        let next = if outer == 0 {
            let mut warm = beta.clone();
            let mut best: Option<(f64, Array1<f64>, f64)> = None;
            for &lam in &grid {
                let spec = PenaltySpec::new(penalty_kind, lam)?;
                let mut w = Array1::<f64>::zeros(nuisance.len());
                for (j, &t) in gamma_abs.iter().enumerate() {
                    w[j] = penalty::derivative(&spec, t)?;
                }
                let sol =
                    prox_grad_solve(cluster, &beta, &g, &target_idx, &w, Some(hyp), &warm, cfg)?;
                let score = hbic_score(cluster, &beta, &g, &target_idx, &sol)?;
                warm = sol.clone();
                match &best {
                    Some((_, _, s)) if *s <= score => {}
                    _ => best = Some((lam, sol, score)),
                }
            }
            let (lam, sol, _) = best.unwrap();
            lambda2 = Some(lam);
            sol
        } else {
            let spec = PenaltySpec::new(penalty_kind, lambda2.unwrap())?;
            let mut w = Array1::<f64>::zeros(nuisance.len());
            for (j, &t) in gamma_abs.iter().enumerate() {
                w[j] = penalty::derivative(&spec, t)?;
            }
            // Warm start at the anchor so the oracle replay can reproduce
            // the same trajectory bit for bit.
            prox_grad_solve(cluster, &beta, &g, &target_idx, &w, Some(hyp), &beta, cfg)?
        };
        let delta = (&next - &beta).iter().map(|v| v * v).sum::<f64>().sqrt();
        beta = next;
        if delta < cfg.outer_tol {
            converged2 = true;
            break;
        }
    }

    let support: Vec<usize> = nuisance
        .iter()
        .copied()
        .filter(|&i| beta[i] != 0.0)
        .collect();
    let beta_hat = PartitionedParam::new(beta, target_idx)?;
    Ok(TwoStageResult {
        beta_hat,
        support,
        anchor_trace,
        anchor_gradients,
        stage2_start,
        comm: cluster.stats().since(&stats_before),
        lambda_chosen: (lambda1, lambda2.unwrap_or(0.0)),
        converged: converged1 && converged2,
        outer_iterations: (k1, k2),
    })
}
