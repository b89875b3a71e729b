//! Plug-in variance construction and the collaborative score-type test.
//!
//! Given the two-stage constrained estimator, the statistic is
//! `T = N‖Ω̂ ∇_b L̂(β̂)‖₂²` on the coordinates b = (θ, γ_Ŝ), where
//! `Ω̂ = V̂^{−1/2} Ĉ_{a0}ᵀ Ĵ₀⁻¹` and `V̂ = Ĉ_{a0}ᵀ Ĵ₀⁻¹ K̂₀ Ĵ₀⁻¹ Ĉ_{a0}`.
//! Under the null it is asymptotically χ²(r); under local alternatives it is
//! noncentral with `e_N = N hᵀV⁻¹h`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cluster::{Cluster, CommStats, SiteVariance};
use crate::error::{Error, Result};
use crate::numerics::{
    chi2_sf, chi2_quantile, inv_psd, inv_sqrt_psd, noncentral_chi2_sf, null_space_affine,
    EIGEN_FLOOR,
};
use crate::penalty::PenaltyKind;
use crate::solver::{prox_grad_solve, StageConfig, TwoStageResult};

/// A linear hypothesis `Cθ = t` on the target block of the parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHypothesis {
    /// Constraint matrix, r×d, full row rank.
    pub c: Array2<f64>,
    /// Right-hand side, length r.
    pub t: Array1<f64>,
    /// Coordinates of β forming θ, in θ order.
    pub target_idx: Vec<usize>,
}

impl LinearHypothesis {
    /// Validates dimensions and that C has full row rank.
    pub fn new(c: Array2<f64>, t: Array1<f64>, target_idx: Vec<usize>) -> Result<Self> {
        let r = c.nrows();
        let d = c.ncols();
        if target_idx.len() != d {
            return Err(Error::BadHypothesis(format!(
                "C has {d} columns but {} target coordinates were given",
                target_idx.len()
            )));
        }
        if t.len() != r {
            return Err(Error::BadHypothesis(format!(
                "C has {r} rows but t has length {}",
                t.len()
            )));
        }
        if r > d {
            return Err(Error::BadHypothesis(format!(
                "more constraints ({r}) than target parameters ({d})"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &target_idx {
            if !seen.insert(i) {
                return Err(Error::BadHypothesis(format!("duplicate target index {i}")));
            }
        }
        // Full row rank check through the orthogonal factorization.
        null_space_affine(&c, &t).map_err(|e| match e {
            Error::RankDeficient { rank, rows } => Error::BadHypothesis(format!(
                "constraint matrix is rank deficient: rank {rank} < {rows} rows"
            )),
            other => other,
        })?;
        Ok(Self { c, t, target_idx })
    }

    pub fn r(&self) -> usize {
        self.c.nrows()
    }

    pub fn d(&self) -> usize {
        self.c.ncols()
    }
}

/// How the variance matrices behind Ω̂ are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// n-weighted pooling of local (J̃_k, K̃_k) into one pair before inversion.
    Pooled,
    /// Per-site Ω̂_k with the averaged statistic Σ_k n_k‖Ω̂_k g‖².
    AveragedLocal,
}

/// Outcome of a score-type test.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Rejection indicator per significance level.
    pub reject_at: BTreeMap<String, bool>,
    /// Estimated nuisance support as global coordinate indices, sorted.
    pub support: Vec<usize>,
    pub noncentrality_hat: Option<f64>,
    pub comm: CommStats,
    pub variance_mode: VarianceMode,
}

/// Builds `(Ω̂, V̂)` from estimated Hessian and score-covariance matrices on
/// the `q = d + ŝ` coordinates.
///
/// By construction `Ω̂ K̂₀ Ω̂ᵀ = I_r`; this identity is what makes the
/// statistic pivotal.
pub fn build_omega(
    j0_hat: &Array2<f64>,
    k0_hat: &Array2<f64>,
    hyp: &LinearHypothesis,
    s_hat: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let d = hyp.d();
    let r = hyp.r();
    let q = d + s_hat;
    if j0_hat.nrows() != q || j0_hat.ncols() != q || k0_hat.nrows() != q || k0_hat.ncols() != q {
        return Err(Error::DimensionMismatch(format!(
            "variance matrices must be {q}x{q} (d = {d}, s_hat = {s_hat})"
        )));
    }
    // Ĉ_{a0} = (C, 0_{r×ŝ})ᵀ ∈ R^{q×r}.
    let mut ca0 = Array2::<f64>::zeros((q, r));
    for i in 0..d {
        for j in 0..r {
            ca0[[i, j]] = hyp.c[[j, i]];
        }
    }
    let j_inv = inv_psd(j0_hat, EIGEN_FLOOR)?;
    let jc = j_inv.dot(&ca0); // q×r
    let mut v = jc.t().dot(&k0_hat.dot(&jc)); // r×r
    // Symmetrize against roundoff before the eigendecomposition.
    for i in 0..v.nrows() {
        for j in 0..i {
            let s = 0.5 * (v[[i, j]] + v[[j, i]]);
            v[[i, j]] = s;
            v[[j, i]] = s;
        }
    }
    let v_inv_sqrt = inv_sqrt_psd(&v, EIGEN_FLOOR)?;
    let omega = v_inv_sqrt.dot(&jc.t()); // r×q
    Ok((omega, v))
}

/// `T = N‖Ω g_b‖₂²`.
pub fn cst_statistic(n_total: usize, omega: &Array2<f64>, g_b: &Array1<f64>) -> Result<f64> {
    if omega.ncols() != g_b.len() {
        return Err(Error::DimensionMismatch(format!(
            "omega is {}x{} but the restricted gradient has length {}",
            omega.nrows(),
            omega.ncols(),
            g_b.len()
        )));
    }
    let z = omega.dot(g_b);
    Ok(n_total as f64 * z.dot(&z))
}

fn restricted(g: &Array1<f64>, idx: &[usize]) -> Array1<f64> {
    Array1::from_iter(idx.iter().map(|&i| g[i]))
}

fn reject_map(statistic: f64, r: usize, alphas: &[f64]) -> Result<BTreeMap<String, bool>> {
    let mut map = BTreeMap::new();
    for &a in alphas {
        let crit = chi2_quantile(a, r as u32)?;
        map.insert(format!("{a}"), statistic > crit);
    }
    Ok(map)
}

/// Aggregates collected variance pairs into a statistic according to the
/// variance mode. Returns `(statistic, mode_used)`.
fn statistic_from_variances(
    variances: &[SiteVariance],
    g_b: &Array1<f64>,
    hyp: &LinearHypothesis,
    s_hat: usize,
    n_total: usize,
    mode: VarianceMode,
) -> Result<f64> {
    let q = hyp.d() + s_hat;
    let n_part: usize = variances.iter().map(|v| v.n).sum();
    match mode {
        VarianceMode::Pooled => {
            let mut j = Array2::<f64>::zeros((q, q));
            let mut k = Array2::<f64>::zeros((q, q));
            for v in variances {
                let w = v.n as f64 / n_part as f64;
                j.scaled_add(w, &v.j);
                k.scaled_add(w, &v.k);
            }
            let (omega, _v) = build_omega(&j, &k, hyp, s_hat)?;
            cst_statistic(n_total, &omega, g_b)
        }
        VarianceMode::AveragedLocal => {
            // T = Σ_k n_k‖Ω̂_k g_b‖², rescaled by N/N_part when sites were
            // excluded from the variance estimation.
            let mut acc = 0.0;
            for v in variances {
                let (omega_k, _) = build_omega(&v.j, &v.k, hyp, s_hat)?;
                let z = omega_k.dot(g_b);
                acc += v.n as f64 * z.dot(&z);
            }
            Ok(acc * n_total as f64 / n_part as f64)
        }
    }
}

/// Runs the collaborative score-type test given a solved two-stage result.
///
/// Adds one gradient round (to evaluate the pooled gradient at β̂) and one
/// variance round. If `AveragedLocal` is requested but some site is too
/// small to invert its local Hessian on the d+ŝ coordinates, the test falls
/// back to pooled estimation; the report's `variance_mode` records what was
/// actually used.
pub fn cst_test(
    cluster: &mut Cluster,
    two_stage: &TwoStageResult,
    hyp: &LinearHypothesis,
    variance_mode: VarianceMode,
    alphas: &[f64],
) -> Result<TestReport> {
    let before = cluster.stats();
    let beta_hat = &two_stage.beta_hat.beta;
    let mut idx = hyp.target_idx.clone();
    idx.extend(two_stage.support.iter().copied());
    let s_hat = two_stage.support.len();
    let n_total = cluster.n_total();

    let g = cluster.global_gradient(beta_hat)?;
    let g_b = restricted(&g, &idx);

    let min_needed = idx.len() + 1;
    let mode = match variance_mode {
        VarianceMode::AveragedLocal
            if cluster.site_sizes().iter().any(|&n| n < min_needed) =>
        {
            VarianceMode::Pooled
        }
        other => other,
    };
    let min_site_n = match mode {
        VarianceMode::Pooled => 1,
        VarianceMode::AveragedLocal => min_needed,
    };
    let variances = cluster.collect_variance(beta_hat, &idx, min_site_n)?;
    let statistic = statistic_from_variances(&variances, &g_b, hyp, s_hat, n_total, mode)?;
    let r = hyp.r();
    let p_value = chi2_sf(statistic, r as u32)?;

    Ok(TestReport {
        statistic,
        df: r,
        p_value,
        reject_at: reject_map(statistic, r, alphas)?,
        support: two_stage.support.clone(),
        noncentrality_hat: None,
        comm: two_stage.comm.plus(&cluster.stats().since(&before)),
        variance_mode: mode,
    })
}

/// Oracle test: replays the second-stage iterations with the nuisance
/// support pinned to the true support `S` (no penalty inside `S`,
/// coordinates outside fixed at zero, constraint active), anchored at the
/// recorded stage-II trace of the practical estimator. When the practical
/// support equals `S` the replay reproduces the same iterates and the two
/// statistics agree exactly.
pub fn ocst_from_trace(
    cluster: &mut Cluster,
    two_stage: &TwoStageResult,
    hyp: &LinearHypothesis,
    true_support: &[usize],
    cfg: &StageConfig,
    variance_mode: VarianceMode,
    alphas: &[f64],
) -> Result<TestReport> {
    let before = cluster.stats();
    let p = cluster.p();
    let nuisance_idx = &two_stage.beta_hat.nuisance_idx;
    let in_support: Vec<bool> = {
        let set: std::collections::HashSet<usize> = true_support.iter().copied().collect();
        nuisance_idx.iter().map(|i| set.contains(i)).collect()
    };
    let weights = Array1::from_iter(
        in_support
            .iter()
            .map(|&inside| if inside { 0.0 } else { f64::INFINITY }),
    );

    let anchors = &two_stage.anchor_trace[two_stage.stage2_start..];
    let grads = &two_stage.anchor_gradients[two_stage.stage2_start..];
    let mut beta = if let Some(first) = anchors.first() {
        first.clone()
    } else {
        two_stage.beta_hat.beta.clone()
    };
    for (anchor, g_anchor) in anchors.iter().zip(grads.iter()) {
        beta = prox_grad_solve(
            cluster,
            anchor,
            g_anchor,
            &hyp.target_idx,
            &weights,
            Some(hyp),
            anchor,
            cfg,
        )?;
    }
    debug_assert_eq!(beta.len(), p);

    let mut idx = hyp.target_idx.clone();
    let mut sorted_support: Vec<usize> = true_support.to_vec();
    sorted_support.sort_unstable();
    idx.extend(sorted_support.iter().copied());
    let s = sorted_support.len();
    let n_total = cluster.n_total();

    let g = cluster.global_gradient(&beta)?;
    let g_b = restricted(&g, &idx);

    let min_needed = idx.len() + 1;
    let mode = match variance_mode {
        VarianceMode::AveragedLocal
            if cluster.site_sizes().iter().any(|&n| n < min_needed) =>
        {
            VarianceMode::Pooled
        }
        other => other,
    };
    let min_site_n = match mode {
        VarianceMode::Pooled => 1,
        VarianceMode::AveragedLocal => min_needed,
    };
    let variances = cluster.collect_variance(&beta, &idx, min_site_n)?;
    let statistic = statistic_from_variances(&variances, &g_b, hyp, s, n_total, mode)?;
    let r = hyp.r();

    Ok(TestReport {
        statistic,
        df: r,
        p_value: chi2_sf(statistic, r as u32)?,
        reject_at: reject_map(statistic, r, alphas)?,
        support: sorted_support,
        noncentrality_hat: None,
        comm: cluster.stats().since(&before),
        variance_mode: mode,
    })
}

/// Oracle test run end to end: solves the two-stage problem internally and
/// replays its second stage restricted to the true support. Simulation use
/// only, since it requires `S`.
#[allow(clippy::too_many_arguments)]
pub fn ocst_test(
    cluster: &mut Cluster,
    hyp: &LinearHypothesis,
    true_support: &[usize],
    penalty_kind: PenaltyKind,
    cfg: &StageConfig,
    variance_mode: VarianceMode,
    alphas: &[f64],
) -> Result<TestReport> {
    let two_stage = crate::solver::run_two_stage(cluster, hyp, penalty_kind, cfg)?;
    ocst_from_trace(
        cluster,
        &two_stage,
        hyp,
        true_support,
        cfg,
        variance_mode,
        alphas,
    )
}

/// Asymptotic power of the level-α test at local alternative `h`:
/// `P(χ²(r, N hᵀV⁻¹h) > χ²_α(r))`.
pub fn asymptotic_power(
    hyp: &LinearHypothesis,
    v: &Array2<f64>,
    h: &Array1<f64>,
    n_total: usize,
    alpha: f64,
) -> Result<f64> {
    let r = hyp.r();
    if v.nrows() != r || v.ncols() != r || h.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "V must be {r}x{r} and h of length {r}"
        )));
    }
    let v_inv = inv_psd(v, EIGEN_FLOOR)?;
    let e_n = n_total as f64 * h.dot(&v_inv.dot(h));
    let crit = chi2_quantile(alpha, r as u32)?;
    noncentral_chi2_sf(crit, r as u32, e_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn random_spd(k: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((k, k));
        for v in m.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        m.t().dot(&m) + Array2::<f64>::eye(k) * 0.5
    }

    #[test]
    fn build_omega_identity_case() {
        let hyp = LinearHypothesis::new(Array2::eye(2), Array1::zeros(2), vec![0, 1]).unwrap();
        let (omega, v) = build_omega(&Array2::eye(2), &Array2::eye(2), &hyp, 0).unwrap();
        assert!((&v - &Array2::eye(2)).iter().all(|x| x.abs() < 1e-10));
        assert!((&omega - &Array2::eye(2)).iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn build_omega_whitening_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for _ in 0..10 {
            let d = 3;
            let s_hat = 2;
            let q = d + s_hat;
            let j0 = random_spd(q, &mut rng);
            let k0 = random_spd(q, &mut rng);
            let hyp = LinearHypothesis::new(
                array![[1.0, 0.0, 0.0], [0.0, 1.0, -1.0]],
                array![0.0, 0.0],
                vec![0, 1, 2],
            )
            .unwrap();
            let (omega, _v) = build_omega(&j0, &k0, &hyp, s_hat).unwrap();
            let w = omega.dot(&k0).dot(&omega.t());
            let err = (&w - &Array2::eye(2))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-8, "whitening identity violated: {err}");
        }
    }

    #[test]
    fn build_omega_bartlett_case() {
        // With K̂₀ = Ĵ₀ the variance collapses to Ĉᵀ Ĵ₀⁻¹ Ĉ.
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let j0 = random_spd(3, &mut rng);
        let hyp = LinearHypothesis::new(array![[1.0]], array![0.0], vec![0]).unwrap();
        let (_omega, v) = build_omega(&j0, &j0, &hyp, 2).unwrap();
        let j_inv = inv_psd(&j0, EIGEN_FLOOR).unwrap();
        assert!((v[[0, 0]] - j_inv[[0, 0]]).abs() < 1e-10);
    }

    #[test]
    fn projection_idempotent() {
        // P₀ = J₀^{−1/2} C_{a0} Ψ₀⁻¹ C_{a0}ᵀ J₀^{−1/2} with Ψ₀ = C_{a0}ᵀ J₀⁻¹ C_{a0}.
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for _ in 0..10 {
            let q = 5;
            let j0 = random_spd(q, &mut rng);
            let mut ca0 = Array2::<f64>::zeros((q, 2));
            ca0[[0, 0]] = 1.0;
            ca0[[1, 1]] = 1.0;
            ca0[[2, 1]] = -1.0;
            let j_inv = inv_psd(&j0, EIGEN_FLOOR).unwrap();
            let j_inv_sqrt = inv_sqrt_psd(&j0, EIGEN_FLOOR).unwrap();
            let psi = ca0.t().dot(&j_inv.dot(&ca0));
            let psi_inv = inv_psd(&psi, EIGEN_FLOOR).unwrap();
            let p0 = j_inv_sqrt
                .dot(&ca0)
                .dot(&psi_inv)
                .dot(&ca0.t())
                .dot(&j_inv_sqrt);
            let p0p0 = p0.dot(&p0);
            let err = (&p0p0 - &p0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-8, "projection not idempotent: {err}");
        }
    }

    #[test]
    fn statistic_arithmetic() {
        let omega = Array2::<f64>::eye(2);
        assert_eq!(cst_statistic(100, &omega, &array![0.0, 0.0]).unwrap(), 0.0);
        let t = cst_statistic(100, &omega, &array![0.1, 0.2]).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
    }

    #[test]
    fn statistic_orthogonal_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        // Random rotation from the QR of a Gaussian matrix.
        let mut m = Array2::<f64>::zeros((3, 3));
        for v in m.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let gram = m.t().dot(&m);
        let eig = crate::numerics::sym_eig(&gram).unwrap();
        let u = eig.eigenvectors; // orthogonal
        let omega = {
            let mut o = Array2::<f64>::zeros((3, 4));
            for v in o.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            o
        };
        let g = array![0.3, -0.2, 0.05, 0.4];
        let t1 = cst_statistic(50, &omega, &g).unwrap();
        let t2 = cst_statistic(50, &u.t().dot(&omega).to_owned(), &g).unwrap();
        assert!((t1 - t2).abs() < 1e-9 * (1.0 + t1));
    }

    #[test]
    fn asymptotic_power_boundary_and_monotone() {
        let hyp = LinearHypothesis::new(array![[1.0]], array![0.0], vec![0]).unwrap();
        let v = array![[1.0]];
        let at_null = asymptotic_power(&hyp, &v, &array![0.0], 4000, 0.05).unwrap();
        assert!((at_null - 0.05).abs() < 1e-9);
        let mut prev = at_null;
        for &h in &[0.01, 0.02, 0.04, 0.08] {
            let pw = asymptotic_power(&hyp, &v, &array![h], 4000, 0.05).unwrap();
            assert!(pw > prev);
            prev = pw;
        }
    }

    #[test]
    fn hypothesis_validation() {
        assert!(LinearHypothesis::new(array![[1.0, -1.0]], array![0.0], vec![3, 4]).is_ok());
        // Rank-deficient C.
        assert!(LinearHypothesis::new(
            array![[1.0, 1.0], [2.0, 2.0]],
            array![0.0, 0.0],
            vec![0, 1]
        )
        .is_err());
        // r > d.
        assert!(LinearHypothesis::new(
            array![[1.0], [2.0], [3.0]],
            array![0.0, 0.0, 0.0],
            vec![0]
        )
        .is_err());
    }
}
