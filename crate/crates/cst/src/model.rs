//! GLM losses with canonical link, per-site data containers, and synthetic
//! data generation.
//!
//! The per-site empirical loss is sample-averaged, `(1/n_k) Σ_i [b(xᵢᵀβ) −
//! yᵢ xᵢᵀβ]`, so the pooled loss is the n_k-weighted average of site losses
//! and aggregation weights stay explicit.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::cholesky_lower;

/// GLM family with canonical link and unit dispersion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    Gaussian,
    Logistic,
}

impl GlmFamily {
    /// Cumulant b(u).
    pub fn cumulant(&self, u: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 0.5 * u * u,
            GlmFamily::Logistic => {
                // log(1 + e^u), branched to avoid overflow for |u| > 30.
                if u > 0.0 {
                    u + (-u).exp().ln_1p()
                } else {
                    u.exp().ln_1p()
                }
            }
        }
    }

    /// Mean function b′(u).
    pub fn mean(&self, u: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => u,
            GlmFamily::Logistic => {
                if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Variance function b″(u) ≥ 0.
    pub fn variance(&self, u: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Logistic => {
                let p = self.mean(u);
                p * (1.0 - p)
            }
        }
    }

    fn validate_response(&self, y: &Array1<f64>) -> Result<()> {
        match self {
            GlmFamily::Gaussian => Ok(()),
            GlmFamily::Logistic => {
                if y.iter().all(|&v| v == 0.0 || v == 1.0) {
                    Ok(())
                } else {
                    Err(Error::SchemaMismatch(
                        "logistic responses must be 0 or 1".into(),
                    ))
                }
            }
        }
    }
}

/// One site's design matrix and responses. Raw data never leaves the site in
/// the simulated protocol; cross-site access goes through the cluster layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteData {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub site_id: usize,
}

impl SiteData {
    pub fn new(fam: GlmFamily, x: Array2<f64>, y: Array1<f64>, site_id: usize) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptySite(format!("site {site_id}")));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "site {site_id}: {} design rows vs {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("site {site_id} data")));
        }
        fam.validate_response(&y)?;
        Ok(Self { x, y, site_id })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// A full parameter vector split into a target block θ and nuisance block γ.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedParam {
    pub beta: Array1<f64>,
    pub target_idx: Vec<usize>,
    pub nuisance_idx: Vec<usize>,
}

impl PartitionedParam {
    /// Build from a target index list; the nuisance block is the ordered
    /// complement.
    pub fn new(beta: Array1<f64>, target_idx: Vec<usize>) -> Result<Self> {
        let p = beta.len();
        let mut seen = vec![false; p];
        for &i in &target_idx {
            if i >= p {
                return Err(Error::InvalidArg(format!(
                    "target index {i} out of range for p = {p}"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidArg(format!("duplicate target index {i}")));
            }
            seen[i] = true;
        }
        let nuisance_idx = (0..p).filter(|i| !seen[*i]).collect();
        Ok(Self {
            beta,
            target_idx,
            nuisance_idx,
        })
    }

    /// Target block θ in target-index order.
    pub fn theta(&self) -> Array1<f64> {
        Array1::from_iter(self.target_idx.iter().map(|&i| self.beta[i]))
    }

    /// Nuisance block γ in nuisance-index order.
    pub fn gamma(&self) -> Array1<f64> {
        Array1::from_iter(self.nuisance_idx.iter().map(|&i| self.beta[i]))
    }

    pub fn d(&self) -> usize {
        self.target_idx.len()
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }
}

fn check_dims(beta: &Array1<f64>, data: &SiteData) -> Result<()> {
    if beta.len() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "parameter length {} vs design width {}",
            beta.len(),
            data.p()
        )));
    }
    Ok(())
}

fn check_idx(idx: &[usize], p: usize) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
        return Err(Error::DimensionMismatch(format!(
            "index {bad} out of range for p = {p}"
        )));
    }
    Ok(())
}

/// Sample-averaged empirical loss `(1/n) Σ b(xᵢᵀβ) − yᵢ xᵢᵀβ`.
pub fn loss(fam: GlmFamily, beta: &Array1<f64>, data: &SiteData) -> Result<f64> {
    check_dims(beta, data)?;
    let eta = data.x.dot(beta);
    let mut acc = 0.0;
    for i in 0..data.n() {
        acc += fam.cumulant(eta[i]) - data.y[i] * eta[i];
    }
    Ok(acc / data.n() as f64)
}

/// Gradient `(1/n) Σ (b′(xᵢᵀβ) − yᵢ) xᵢ`.
pub fn gradient(fam: GlmFamily, beta: &Array1<f64>, data: &SiteData) -> Result<Array1<f64>> {
    check_dims(beta, data)?;
    let eta = data.x.dot(beta);
    let n = data.n();
    let mut resid = Array1::<f64>::zeros(n);
    for i in 0..n {
        resid[i] = (fam.mean(eta[i]) - data.y[i]) / n as f64;
    }
    Ok(data.x.t().dot(&resid))
}

/// Per-sample score rows `(b′(xᵢᵀβ) − yᵢ)·xᵢ` restricted to `idx`.
pub fn per_sample_scores(
    fam: GlmFamily,
    beta: &Array1<f64>,
    data: &SiteData,
    idx: &[usize],
) -> Result<Array2<f64>> {
    check_dims(beta, data)?;
    check_idx(idx, data.p())?;
    let eta = data.x.dot(beta);
    let n = data.n();
    let mut out = Array2::<f64>::zeros((n, idx.len()));
    for i in 0..n {
        let r = fam.mean(eta[i]) - data.y[i];
        for (c, &j) in idx.iter().enumerate() {
            out[[i, c]] = r * data.x[[i, j]];
        }
    }
    Ok(out)
}

/// Empirical Hessian `(1/n) Σ b″(xᵢᵀβ) x_{i,idx} x_{i,idx}ᵀ`.
pub fn hessian(
    fam: GlmFamily,
    beta: &Array1<f64>,
    data: &SiteData,
    idx: &[usize],
) -> Result<Array2<f64>> {
    check_dims(beta, data)?;
    check_idx(idx, data.p())?;
    let eta = data.x.dot(beta);
    let n = data.n();
    let k = idx.len();
    let mut out = Array2::<f64>::zeros((k, k));
    let mut row = vec![0.0f64; k];
    for i in 0..n {
        let w = fam.variance(eta[i]) / n as f64;
        if w == 0.0 {
            continue;
        }
        for (c, &j) in idx.iter().enumerate() {
            row[c] = data.x[[i, j]];
        }
        for a in 0..k {
            let wa = w * row[a];
            for b in a..k {
                out[[a, b]] += wa * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            out[[a, b]] = out[[b, a]];
        }
    }
    Ok(out)
}

/// Covariate covariance specification for simulation.
#[derive(Debug, Clone)]
pub enum CovarianceSpec {
    /// Toeplitz correlation Σ_jk = ρ^{|j−k|}, |ρ| < 1.
    Toeplitz(f64),
    /// Explicit SPD covariance matrix.
    Explicit(Array2<f64>),
}

/// Simulate one site of GLM data with N(0, Σ) covariates.
///
/// The Toeplitz case applies the AR(1) recursion `x_j = ρ x_{j−1} +
/// √(1−ρ²) z_j`, which is the closed form of the Cholesky transform for
/// that covariance; the explicit case factors Σ densely. Deterministic
/// given the seed.
pub fn simulate(
    fam: GlmFamily,
    beta_star: &Array1<f64>,
    n: usize,
    sigma: &CovarianceSpec,
    seed: u64,
) -> Result<SiteData> {
    if n == 0 {
        return Err(Error::InvalidArg("simulate requires n >= 1".into()));
    }
    let p = beta_star.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x = Array2::<f64>::zeros((n, p));
    match sigma {
        CovarianceSpec::Toeplitz(rho) => {
            if !(rho.abs() < 1.0) {
                return Err(Error::InvalidCovariance(format!(
                    "Toeplitz parameter must satisfy |rho| < 1, got {rho}"
                )));
            }
            let scale = (1.0 - rho * rho).sqrt();
            for i in 0..n {
                let mut prev: f64 = rng.sample(StandardNormal);
                x[[i, 0]] = prev;
                for j in 1..p {
                    let z: f64 = rng.sample(StandardNormal);
                    prev = rho * prev + scale * z;
                    x[[i, j]] = prev;
                }
            }
        }
        CovarianceSpec::Explicit(s) => {
            if s.nrows() != p || s.ncols() != p {
                return Err(Error::InvalidCovariance(format!(
                    "covariance is {}x{} but p = {p}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            let l = cholesky_lower(s)
                .map_err(|_| Error::InvalidCovariance("matrix is not SPD".into()))?;
            let mut z = vec![0.0f64; p];
            for i in 0..n {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for j in 0..p {
                    let mut acc = 0.0;
                    for k in 0..=j {
                        acc += l[[j, k]] * z[k];
                    }
                    x[[i, j]] = acc;
                }
            }
        }
    }
    let eta = x.dot(beta_star);
    let mut y = Array1::<f64>::zeros(n);
    match fam {
        GlmFamily::Gaussian => {
            for i in 0..n {
                let eps: f64 = rng.sample(StandardNormal);
                y[i] = eta[i] + eps;
            }
        }
        GlmFamily::Logistic => {
            for i in 0..n {
                let u: f64 = rng.gen();
                y[i] = if u < fam.mean(eta[i]) { 1.0 } else { 0.0 };
            }
        }
    }
    SiteData::new(fam, x, y, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_instance(
        fam: GlmFamily,
        n: usize,
        p: usize,
        seed: u64,
    ) -> (Array1<f64>, SiteData) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut beta = Array1::<f64>::zeros(p);
        for v in beta.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * 0.5;
        }
        let mut x = Array2::<f64>::zeros((n, p));
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mut y = Array1::<f64>::zeros(n);
        for v in y.iter_mut() {
            *v = match fam {
                GlmFamily::Gaussian => rng.sample(StandardNormal),
                GlmFamily::Logistic => {
                    if rng.gen::<f64>() < 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
        (beta, SiteData::new(fam, x, y, 0).unwrap())
    }

    #[test]
    fn loss_closed_forms() {
        let data = SiteData::new(
            GlmFamily::Gaussian,
            array![[1.0, 0.0], [0.0, 1.0]],
            array![2.0, -1.0],
            0,
        )
        .unwrap();
        assert_eq!(loss(GlmFamily::Gaussian, &array![0.0, 0.0], &data).unwrap(), 0.0);

        let single = SiteData::new(GlmFamily::Gaussian, array![[1.0, 0.0]], array![2.0], 0).unwrap();
        let l = loss(GlmFamily::Gaussian, &array![1.0, 0.0], &single).unwrap();
        assert!((l - (-1.5)).abs() < 1e-12);

        let logit = SiteData::new(
            GlmFamily::Logistic,
            array![[1.0, 2.0], [0.5, -1.0]],
            array![1.0, 0.0],
            0,
        )
        .unwrap();
        let l = loss(GlmFamily::Logistic, &array![0.0, 0.0], &logit).unwrap();
        assert!((l - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_closed_forms() {
        let logit = SiteData::new(GlmFamily::Logistic, array![[2.0, -1.0]], array![1.0], 0).unwrap();
        let g = gradient(GlmFamily::Logistic, &array![0.0, 0.0], &logit).unwrap();
        assert!((g[0] - (-1.0)).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-6;
        for seed in 0..50u64 {
            let fam = if seed % 2 == 0 {
                GlmFamily::Gaussian
            } else {
                GlmFamily::Logistic
            };
            let (beta, data) = random_instance(fam, 30, 6, seed);
            let g = gradient(fam, &beta, &data).unwrap();
            for j in 0..6 {
                let mut up = beta.clone();
                up[j] += h;
                let mut dn = beta.clone();
                dn[j] -= h;
                let num = (loss(fam, &up, &data).unwrap() - loss(fam, &dn, &data).unwrap())
                    / (2.0 * h);
                let scale = g[j].abs().max(1.0);
                assert!(
                    (num - g[j]).abs() / scale < 1e-6,
                    "seed {seed} coord {j}: {num} vs {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20u64 {
            let fam = if seed % 2 == 0 {
                GlmFamily::Gaussian
            } else {
                GlmFamily::Logistic
            };
            let (beta, data) = random_instance(fam, 40, 5, 100 + seed);
            let idx: Vec<usize> = (0..5).collect();
            let hess = hessian(fam, &beta, &data, &idx).unwrap();
            for j in 0..5 {
                let mut up = beta.clone();
                up[j] += h;
                let mut dn = beta.clone();
                dn[j] -= h;
                let gu = gradient(fam, &up, &data).unwrap();
                let gd = gradient(fam, &dn, &data).unwrap();
                for i in 0..5 {
                    let num = (gu[i] - gd[i]) / (2.0 * h);
                    let scale = hess[[i, j]].abs().max(1.0);
                    assert!(
                        (num - hess[[i, j]]).abs() / scale < 1e-5,
                        "seed {seed} ({i},{j}): {num} vs {}",
                        hess[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_gaussian_is_design_gram() {
        let (beta, data) = random_instance(GlmFamily::Gaussian, 25, 4, 3);
        let idx = [1usize, 3];
        let h = hessian(GlmFamily::Gaussian, &beta, &data, &idx).unwrap();
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..25 {
                    acc += data.x[[i, ia]] * data.x[[i, ib]];
                }
                assert!((h[[a, b]] - acc / 25.0).abs() < 1e-12);
            }
        }
        // Logistic at β = 0 is a quarter of the Gram matrix.
        let h0 = hessian(GlmFamily::Logistic, &Array1::zeros(4), &data, &idx).unwrap();
        let hg = hessian(GlmFamily::Gaussian, &Array1::zeros(4), &data, &idx).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!((h0[[a, b]] - 0.25 * hg[[a, b]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_column_mean_equals_gradient() {
        let (beta, data) = random_instance(GlmFamily::Logistic, 30, 5, 8);
        let idx = [0usize, 2, 4];
        let s = per_sample_scores(GlmFamily::Logistic, &beta, &data, &idx).unwrap();
        let g = gradient(GlmFamily::Logistic, &beta, &data).unwrap();
        for (c, &j) in idx.iter().enumerate() {
            let mean = s.column(c).sum() / 30.0;
            assert!((mean - g[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_vanish_on_exact_fit() {
        let x = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let beta = array![0.7, -0.2];
        let y = x.dot(&beta);
        let data = SiteData::new(GlmFamily::Gaussian, x, y, 0).unwrap();
        let s = per_sample_scores(GlmFamily::Gaussian, &beta, &data, &[0, 1]).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_convexity_monotone() {
        for seed in 0..20u64 {
            let fam = if seed % 2 == 0 {
                GlmFamily::Gaussian
            } else {
                GlmFamily::Logistic
            };
            let (b1, data) = random_instance(fam, 30, 5, 200 + seed);
            let (b2, _) = random_instance(fam, 30, 5, 300 + seed);
            let g1 = gradient(fam, &b1, &data).unwrap();
            let g2 = gradient(fam, &b2, &data).unwrap();
            let inner = (&g1 - &g2).dot(&(&b1 - &b2));
            assert!(inner >= -1e-10, "seed {seed}: {inner}");
        }
    }

    #[test]
    fn simulate_determinism_and_moments() {
        let beta = Array1::<f64>::zeros(3);
        let a = simulate(GlmFamily::Logistic, &beta, 4000, &CovarianceSpec::Toeplitz(0.5), 42)
            .unwrap();
        let b = simulate(GlmFamily::Logistic, &beta, 4000, &CovarianceSpec::Toeplitz(0.5), 42)
            .unwrap();
        assert_eq!(a, b);

        // Symmetric link at β = 0: mean response near 1/2.
        let ymean = a.y.sum() / a.n() as f64;
        assert!((ymean - 0.5).abs() < 3.0 / (4000f64).sqrt());

        // Toeplitz 0.5: cov(x₁, x₃) = 0.25.
        let mut c13 = 0.0;
        for i in 0..a.n() {
            c13 += a.x[[i, 0]] * a.x[[i, 2]];
        }
        c13 /= a.n() as f64;
        assert!((c13 - 0.25).abs() < 4.0 / (4000f64).sqrt());

        // Independent case: off-diagonal sample covariance near zero.
        let z = simulate(GlmFamily::Gaussian, &beta, 4000, &CovarianceSpec::Toeplitz(0.0), 7)
            .unwrap();
        let mut c12 = 0.0;
        for i in 0..z.n() {
            c12 += z.x[[i, 0]] * z.x[[i, 1]];
        }
        c12 /= z.n() as f64;
        assert!(c12.abs() < 4.0 / (4000f64).sqrt());
    }

    #[test]
    fn simulate_explicit_covariance_matches_toeplitz() {
        let p = 4;
        let mut s = Array2::<f64>::zeros((p, p));
        for i in 0..p {
            for j in 0..p {
                s[[i, j]] = 0.5f64.powi((i as i32 - j as i32).abs());
            }
        }
        let beta = Array1::<f64>::zeros(p);
        let a = simulate(GlmFamily::Gaussian, &beta, 500, &CovarianceSpec::Toeplitz(0.5), 5)
            .unwrap();
        let b = simulate(GlmFamily::Gaussian, &beta, 500, &CovarianceSpec::Explicit(s), 5)
            .unwrap();
        // Same law, different samplers; compare second moments loosely.
        let mut ca = 0.0;
        let mut cb = 0.0;
        for i in 0..500 {
            ca += a.x[[i, 0]] * a.x[[i, 1]];
            cb += b.x[[i, 0]] * b.x[[i, 1]];
        }
        assert!((ca / 500.0 - cb / 500.0).abs() < 0.2);

        let bad = Array2::<f64>::zeros((p, p));
        assert!(matches!(
            simulate(GlmFamily::Gaussian, &beta, 10, &CovarianceSpec::Explicit(bad), 1),
            Err(Error::InvalidCovariance(_))
        ));
    }

    #[test]
    fn partitioned_param_blocks() {
        let pp = PartitionedParam::new(array![1.0, 2.0, 3.0, 4.0], vec![3, 0]).unwrap();
        assert_eq!(pp.theta(), array![4.0, 1.0]);
        assert_eq!(pp.gamma(), array![2.0, 3.0]);
        assert_eq!(pp.nuisance_idx, vec![1, 2]);
        assert!(PartitionedParam::new(array![1.0], vec![0, 0]).is_err());
        assert!(PartitionedParam::new(array![1.0], vec![5]).is_err());
    }

    #[test]
    fn logistic_response_domain_checked() {
        let x = array![[1.0], [1.0]];
        assert!(SiteData::new(GlmFamily::Logistic, x, array![0.0, 2.0], 0).is_err());
    }
}
