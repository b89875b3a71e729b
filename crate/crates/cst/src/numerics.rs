//! Dense symmetric linear algebra and chi-square distribution functions.
//!
//! Everything here is deterministic: the eigensolver is cyclic Jacobi with a
//! fixed sweep order, the null-space basis is sign-normalized, and the
//! distribution functions are series/continued-fraction evaluations with
//! explicit truncation tolerances. No LAPACK backend is involved, so results
//! are bit-reproducible across machines.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Entrywise symmetry tolerance demanded of eigensolver inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Default eigenvalue floor below which matrices are declared near-singular.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues, largest first.
    pub eigenvalues: Array1<f64>,
    /// Orthonormal eigenvectors as columns, matching `eigenvalues` order.
    pub eigenvectors: Array2<f64>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input must be square and symmetric within [`SYMMETRY_TOL`] entrywise.
/// Eigenvector columns are sign-fixed so the largest-magnitude entry of each
/// column is positive.
pub fn sym_eig(a: &Array2<f64>) -> Result<SymEig> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "sym_eig expects a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if worst > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            tol: SYMMETRY_TOL,
            found: worst,
        });
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sym_eig input".into()));
    }

    // Work on the symmetrized copy so tiny asymmetries cannot bias rotations.
    let mut s = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            s[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v = Array2::<f64>::eye(n);

    let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let stop = f64::EPSILON * norm;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += s[[p, q]] * s[[p, q]];
            }
        }
        if (2.0 * off).sqrt() <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s[[p, q]];
                if apq.abs() <= stop * 1e-3 {
                    continue;
                }
                let app = s[[p, p]];
                let aqq = s[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[[k, p]];
                    let skq = s[[k, q]];
                    s[[k, p]] = c * skp - sn * skq;
                    s[[k, q]] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[[p, k]];
                    let sqk = s[[q, k]];
                    s[[p, k]] = c * spk - sn * sqk;
                    s[[q, k]] = sn * spk + c * sqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[[j, j]].partial_cmp(&s[[i, i]]).unwrap());
    let mut eigenvalues = Array1::<f64>::zeros(n);
    let mut eigenvectors = Array2::<f64>::zeros((n, n));
    for (newcol, &oldcol) in order.iter().enumerate() {
        eigenvalues[newcol] = s[[oldcol, oldcol]];
        let mut best = 0usize;
        for k in 1..n {
            if v[[k, oldcol]].abs() > v[[best, oldcol]].abs() {
                best = k;
            }
        }
        let flip = if v[[best, oldcol]] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            eigenvectors[[k, newcol]] = flip * v[[k, oldcol]];
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// `A^{-1/2}` for a symmetric PSD matrix via its eigendecomposition.
///
/// Fails with [`Error::NearSingular`] if any eigenvalue falls below `floor`,
/// so degenerate variance matrices surface as errors instead of being
/// silently regularized.
pub fn inv_sqrt_psd(a: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    if floor <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "inv_sqrt_psd floor must be positive, got {floor}"
        )));
    }
    let eig = sym_eig(a)?;
    rebuild_spectral(&eig, floor, |lam| 1.0 / lam.sqrt())
}

/// `A^{-1}` for a symmetric PSD matrix, same floor semantics as [`inv_sqrt_psd`].
pub fn inv_psd(a: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    if floor <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "inv_psd floor must be positive, got {floor}"
        )));
    }
    let eig = sym_eig(a)?;
    rebuild_spectral(&eig, floor, |lam| 1.0 / lam)
}

fn rebuild_spectral(
    eig: &SymEig,
    floor: f64,
    f: impl Fn(f64) -> f64,
) -> Result<Array2<f64>> {
    let n = eig.eigenvalues.len();
    for &lam in eig.eigenvalues.iter() {
        if lam < floor {
            return Err(Error::NearSingular {
                eigenvalue: lam,
                floor,
            });
        }
    }
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let w = f(eig.eigenvalues[k]);
        for i in 0..n {
            let qik = eig.eigenvectors[[i, k]];
            if qik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[[i, j]] += w * qik * eig.eigenvectors[[j, k]];
            }
        }
    }
    Ok(out)
}

/// Affine parameterization of the solution set `{θ : Cθ = t}`.
///
/// Returns `(θ₀, Z)` where `θ₀` is the minimum-norm particular solution and
/// `Z` is a `d×(d−r)` orthonormal basis of the null space of `C`, so every
/// feasible point is `θ₀ + Z·u`. The basis is deterministic: each column's
/// largest-magnitude entry is made positive.
pub fn null_space_affine(c: &Array2<f64>, t: &Array1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let r = c.nrows();
    let d = c.ncols();
    if t.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "constraint C is {r}x{d} but t has length {}",
            t.len()
        )));
    }
    if r > d {
        return Err(Error::RankDeficient { rank: d, rows: r });
    }
    let cmax = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * cmax * (r.max(d) as f64);

    // Householder QR of Cᵀ (d×r): Cᵀ = Q R with Q accumulated densely.
    let mut m = c.t().to_owned();
    let mut q = Array2::<f64>::eye(d);
    for j in 0..r {
        let mut alpha = 0.0f64;
        for i in j..d {
            alpha += m[[i, j]] * m[[i, j]];
        }
        let alpha = alpha.sqrt();
        if alpha == 0.0 {
            continue;
        }
        let sign = if m[[j, j]] >= 0.0 { 1.0 } else { -1.0 };
        let mut u = vec![0.0f64; d - j];
        u[0] = m[[j, j]] + sign * alpha;
        for i in (j + 1)..d {
            u[i - j] = m[[i, j]];
        }
        let unorm2: f64 = u.iter().map(|x| x * x).sum();
        if unorm2 == 0.0 {
            continue;
        }
        // Apply H = I − 2uuᵀ/‖u‖² to the remaining block of M and to Q.
        for col in j..r {
            let mut dot = 0.0f64;
            for i in j..d {
                dot += u[i - j] * m[[i, col]];
            }
            let scale = 2.0 * dot / unorm2;
            for i in j..d {
                m[[i, col]] -= scale * u[i - j];
            }
        }
        for col in 0..d {
            let mut dot = 0.0f64;
            for i in j..d {
                dot += u[i - j] * q[[col, i]];
            }
            let scale = 2.0 * dot / unorm2;
            for i in j..d {
                q[[col, i]] -= scale * u[i - j];
            }
        }
    }

    let mut rank = 0usize;
    for j in 0..r {
        if m[[j, j]].abs() > tol {
            rank += 1;
        }
    }
    if rank < r {
        return Err(Error::RankDeficient { rank, rows: r });
    }

    // C = R₁ᵀ Q₁ᵀ. Solve R₁ᵀ w = t (forward substitution), θ₀ = Q₁ w.
    let mut w = vec![0.0f64; r];
    for i in 0..r {
        let mut acc = t[i];
        for k in 0..i {
            acc -= m[[k, i]] * w[k];
        }
        w[i] = acc / m[[i, i]];
    }
    let mut theta0 = Array1::<f64>::zeros(d);
    for i in 0..d {
        let mut acc = 0.0f64;
        for k in 0..r {
            acc += q[[i, k]] * w[k];
        }
        theta0[i] = acc;
    }

    let mut z = Array2::<f64>::zeros((d, d - r));
    for col in r..d {
        let mut best = 0usize;
        for i in 1..d {
            if q[[i, col]].abs() > q[[best, col]].abs() {
                best = i;
            }
        }
        let flip = if q[[best, col]] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            z[[i, col - r]] = flip * q[[i, col]];
        }
    }
    Ok((theta0, z))
}

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x) by series expansion.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..1000 {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (a * x.ln() - x - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction (Lentz).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (a * x.ln() - x - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x).
fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

/// Survival function `P(χ²(r) > x)`.
pub fn chi2_sf(x: f64, r: u32) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArg(format!("chi2_sf requires x >= 0, got {x}")));
    }
    if r < 1 {
        return Err(Error::InvalidArg("chi2_sf requires r >= 1".into()));
    }
    Ok(gamma_q(r as f64 / 2.0, x / 2.0))
}

/// Upper-α quantile of χ²(r): the x with `chi2_sf(x, r) = alpha`.
pub fn chi2_quantile(alpha: f64, r: u32) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArg(format!(
            "chi2_quantile requires alpha in (0,1), got {alpha}"
        )));
    }
    if r < 1 {
        return Err(Error::InvalidArg("chi2_quantile requires r >= 1".into()));
    }
    let mut hi = r as f64 + 10.0;
    while chi2_sf(hi, r)? > alpha {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    let mut lo = 0.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_sf(mid, r)? > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Survival function of the noncentral chi-square `P(χ²(r, e) > x)`.
///
/// Evaluated as a Poisson(e/2) mixture of central chi-square survival
/// functions, truncated once the remaining Poisson mass is below 1e−12.
/// Reduces exactly to [`chi2_sf`] when `e = 0`.
pub fn noncentral_chi2_sf(x: f64, r: u32, e: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArg(format!(
            "noncentral_chi2_sf requires x >= 0, got {x}"
        )));
    }
    if !(e >= 0.0) {
        return Err(Error::InvalidArg(format!(
            "noncentral_chi2_sf requires e >= 0, got {e}"
        )));
    }
    if r < 1 {
        return Err(Error::InvalidArg("noncentral_chi2_sf requires r >= 1".into()));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if e == 0.0 {
        return chi2_sf(x, r);
    }
    let half_e = 0.5 * e;
    let a0 = r as f64 / 2.0;
    let z = 0.5 * x;
    // Q(a+1, z) = Q(a, z) + z^a e^{−z} / Γ(a+1), iterated from Q(a0, z).
    let mut q = gamma_q(a0, z);
    let mut dq = (a0 * z.ln() - z - ln_gamma(a0 + 1.0)).exp();
    let mut w = (-half_e).exp();
    let mut remaining = 1.0 - w;
    let mut sum = w * q;
    let mut j = 0usize;
    while remaining > 1e-12 && j < 100_000 {
        j += 1;
        w *= half_e / j as f64;
        remaining -= w;
        q += dq;
        dq *= z / (a0 + j as f64);
        sum += w * q.min(1.0);
    }
    Ok(sum.min(1.0))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky expects a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::NearSingular {
                        eigenvalue: acc,
                        floor: 0.0,
                    });
                }
                l[[i, j]] = acc.sqrt();
            } else {
                l[[i, j]] = acc / l[[j, j]];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Quadrature oracle for the chi-square survival function: composite
    /// Simpson on the chi density after the substitution u = v², which
    /// removes the integrable singularity at zero for r = 1.
    fn chi2_sf_quadrature(x: f64, r: u32) -> f64 {
        let a = r as f64 / 2.0;
        let upper = x.sqrt();
        let steps = 200_000usize;
        let h = upper / steps as f64;
        let norm = (a * (2.0f64).ln() + ln_gamma(a)).exp();
        let f = |v: f64| -> f64 {
            if v == 0.0 {
                if r == 1 {
                    2.0 / norm
                } else {
                    0.0
                }
            } else {
                2.0 * v.powi(r as i32 - 1) * (-0.5 * v * v).exp() / norm
            }
        };
        let mut acc = f(0.0) + f(upper);
        for i in 1..steps {
            let v = i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(v);
        }
        1.0 - acc * h / 3.0
    }

    #[test]
    fn sym_eig_identity_and_diagonal() {
        let e = sym_eig(&Array2::<f64>::eye(2)).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-12);

        let e = sym_eig(&array![[4.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((e.eigenvalues[0] - 4.0).abs() < 1e-12);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!((e.eigenvectors[[0, 0]].abs() - 1.0).abs() < 1e-12);
        assert!((e.eigenvectors[[1, 1]].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_two_by_two_hand_values() {
        // Characteristic polynomial of [[2,1],[1,2]]: (2−λ)²−1 → λ ∈ {3, 1}.
        let e = sym_eig(&array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let err = sym_eig(&array![[1.0, 2.0], [0.0, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::NotSymmetric { .. }));
    }

    #[test]
    fn sym_eig_reconstruction_random() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut a = Array2::<f64>::zeros((5, 5));
            for i in 0..5 {
                for j in 0..=i {
                    let v: f64 = rng.sample(StandardNormal);
                    a[[i, j]] = v;
                    a[[j, i]] = v;
                }
            }
            let e = sym_eig(&a).unwrap();
            let q = &e.eigenvectors;
            let lam = Array2::from_diag(&e.eigenvalues);
            let recon = q.dot(&lam).dot(&q.t());
            let err = max_abs(&(&recon - &a));
            assert!(err <= 1e-10 * (1.0 + max_abs(&a)), "reconstruction err {err}");
            let qtq = q.t().dot(q);
            let orth = max_abs(&(&qtq - &Array2::eye(5)));
            assert!(orth <= 1e-10, "orthonormality err {orth}");
        }
    }

    #[test]
    fn inv_sqrt_psd_diagonal_and_identity() {
        let b = inv_sqrt_psd(&Array2::<f64>::eye(3), EIGEN_FLOOR).unwrap();
        assert!(max_abs(&(&b - &Array2::eye(3))) < 1e-12);

        let b = inv_sqrt_psd(&array![[4.0, 0.0], [0.0, 9.0]], EIGEN_FLOOR).unwrap();
        assert!((b[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((b[[1, 1]] - 1.0 / 3.0).abs() < 1e-12);
        assert!(b[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_psd_sandwich_identity() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let b = inv_sqrt_psd(&a, EIGEN_FLOOR).unwrap();
        let prod = b.dot(&a).dot(&b);
        assert!(max_abs(&(&prod - &Array2::eye(2))) < 1e-8);
    }

    #[test]
    fn inv_sqrt_psd_random_spd() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut m = Array2::<f64>::zeros((4, 4));
            for v in m.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let a = m.t().dot(&m) + Array2::<f64>::eye(4) * 1e-3;
            let b = inv_sqrt_psd(&a, EIGEN_FLOOR).unwrap();
            let prod = b.dot(&a).dot(&b);
            assert!(max_abs(&(&prod - &Array2::eye(4))) < 1e-8);
        }
    }

    #[test]
    fn inv_sqrt_psd_near_singular_detected() {
        let a = array![[1.0, 0.0], [0.0, 1e-14]];
        assert!(matches!(
            inv_sqrt_psd(&a, EIGEN_FLOOR),
            Err(Error::NearSingular { .. })
        ));
    }

    #[test]
    fn null_space_coordinate_constraint() {
        let (theta0, z) = null_space_affine(&array![[1.0, 0.0]], &array![0.0]).unwrap();
        assert!(theta0.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(z.dim(), (2, 1));
        assert!(z[[0, 0]].abs() < 1e-12);
        assert!((z[[1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_space_contrast_constraint() {
        let c = array![[1.0, -1.0]];
        let (theta0, z) = null_space_affine(&c, &array![0.0]).unwrap();
        assert!((c.dot(&theta0)[0]).abs() < 1e-10);
        let cz = c.dot(&z);
        assert!(cz.iter().all(|v| v.abs() < 1e-10));
        let ztz = z.t().dot(&z);
        assert!(max_abs(&(&ztz - &Array2::eye(1))) < 1e-10);
        // Direction (1,1)/√2 with positive sign fixing.
        let s = 1.0 / 2.0f64.sqrt();
        assert!((z[[0, 0]] - s).abs() < 1e-10);
        assert!((z[[1, 0]] - s).abs() < 1e-10);
    }

    #[test]
    fn null_space_fully_pinned() {
        let (theta0, z) = null_space_affine(&Array2::<f64>::eye(2), &array![3.0, 4.0]).unwrap();
        assert!((theta0[0] - 3.0).abs() < 1e-10);
        assert!((theta0[1] - 4.0).abs() < 1e-10);
        assert_eq!(z.dim(), (2, 0));
    }

    #[test]
    fn null_space_rank_deficient() {
        let c = array![[1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(
            null_space_affine(&c, &array![0.0, 0.0]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn null_space_random_constraints() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = 2usize;
            let d = 5usize;
            let mut c = Array2::<f64>::zeros((r, d));
            for v in c.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let mut t = Array1::<f64>::zeros(r);
            for v in t.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let (theta0, z) = null_space_affine(&c, &t).unwrap();
            let res = &c.dot(&theta0) - &t;
            assert!(res.iter().all(|v| v.abs() < 1e-10));
            let cz = c.dot(&z);
            assert!(cz.iter().all(|v| v.abs() < 1e-10));
            let ztz = z.t().dot(&z);
            assert!(max_abs(&(&ztz - &Array2::eye(d - r))) < 1e-10);
        }
    }

    #[test]
    fn chi2_sf_boundary_and_table_values() {
        assert_eq!(chi2_sf(0.0, 3).unwrap(), 1.0);
        // Frozen from the quadrature oracle below.
        assert!((chi2_sf(3.8415, 1).unwrap() - 0.0500).abs() < 1e-4);
        assert!((chi2_sf(7.8147, 3).unwrap() - 0.0500).abs() < 1e-4);
    }

    #[test]
    fn chi2_sf_matches_quadrature_oracle() {
        for &(x, r) in &[(3.8415f64, 1u32), (7.8147, 3), (1.0, 2), (12.5, 5), (0.3, 4)] {
            let oracle = chi2_sf_quadrature(x, r);
            let got = chi2_sf(x, r).unwrap();
            assert!(
                (got - oracle).abs() < 1e-9,
                "x={x} r={r}: got {got}, oracle {oracle}"
            );
        }
    }

    #[test]
    fn chi2_sf_invalid_args() {
        assert!(chi2_sf(-1.0, 1).is_err());
        assert!(chi2_sf(1.0, 0).is_err());
        assert!(chi2_quantile(0.0, 1).is_err());
        assert!(chi2_quantile(1.0, 1).is_err());
    }

    #[test]
    fn chi2_quantile_table_values() {
        assert!((chi2_quantile(0.05, 1).unwrap() - 3.8415).abs() < 1e-3);
        assert!((chi2_quantile(0.05, 3).unwrap() - 7.8147).abs() < 1e-3);
        // α → 1⁻ pushes the quantile to zero.
        assert!(chi2_quantile(0.9999, 2).unwrap() < 1e-3);
    }

    #[test]
    fn chi2_quantile_sf_mutual_inverses() {
        for r in 1..=10u32 {
            for &alpha in &[0.9, 0.5, 0.1, 0.05, 0.01] {
                let x = chi2_quantile(alpha, r).unwrap();
                let back = chi2_sf(x, r).unwrap();
                assert!(
                    (back - alpha).abs() < 1e-6,
                    "r={r} alpha={alpha}: sf(q)={back}"
                );
            }
        }
    }

    #[test]
    fn noncentral_reduces_to_central() {
        for &(x, r) in &[(3.8415f64, 1u32), (7.8147, 3), (1.0, 2)] {
            let c = chi2_sf(x, r).unwrap();
            let nc = noncentral_chi2_sf(x, r, 0.0).unwrap();
            assert_eq!(c, nc);
        }
        assert_eq!(noncentral_chi2_sf(0.0, 2, 5.0).unwrap(), 1.0);
    }

    #[test]
    fn noncentral_matches_sampling_oracle() {
        // (Z + √e)² with e = 4 sampled 10⁷ times.
        let e = 4.0f64;
        let x = 3.8415f64;
        let mut rng = ChaCha20Rng::seed_from_u64(20240811);
        let n = 10_000_000usize;
        let mut count = 0usize;
        let shift = e.sqrt();
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let v = (z + shift) * (z + shift);
            if v > x {
                count += 1;
            }
        }
        let mc = count as f64 / n as f64;
        let got = noncentral_chi2_sf(x, 1, e).unwrap();
        assert!((got - mc).abs() < 1e-3, "got {got}, sampling oracle {mc}");
    }

    #[test]
    fn noncentral_monotone_in_noncentrality() {
        for &(x, r) in &[(3.8415f64, 1u32), (7.8147, 3)] {
            let mut prev = noncentral_chi2_sf(x, r, 0.0).unwrap();
            for &e in &[0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
                let cur = noncentral_chi2_sf(x, r, e).unwrap();
                assert!(cur > prev, "x={x} r={r} e={e}: {cur} <= {prev}");
                prev = cur;
            }
        }
    }

    #[test]
    fn cholesky_round_trip() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky_lower(&a).unwrap();
        let recon = l.dot(&l.t());
        assert!(max_abs(&(&recon - &a)) < 1e-12);
        assert!(cholesky_lower(&array![[1.0, 2.0], [2.0, 1.0]]).is_err());
    }
}
