//! Dense linear-algebra helpers shared by the inference and control code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Result, SolarError};

/// Jitter added on the single retry of a failed Cholesky factorisation.
pub const CHOLESKY_JITTER: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorisation of a symmetric matrix with one jittered retry.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(SolarError::Dimension(format!("{what}: matrix is not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SolarError::NonFinite(what.to_string()));
    }
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        if c.l_dirty().diagonal().iter().all(|&d| d > 0.0) {
            return Ok(c);
        }
    }
    let n = sym.nrows();
    let jittered = sym + DMatrix::identity(n, n) * CHOLESKY_JITTER;
    match Cholesky::new(jittered) {
        Some(c) if c.l_dirty().diagonal().iter().all(|&d| d > 0.0) => Ok(c),
        _ => Err(SolarError::NotPositiveDefinite(what.to_string())),
    }
}

pub fn logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

/// Multivariate log-gamma `log Γ_d(x)`.
pub fn mv_lgamma(x: f64, d: usize) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..d).map(|i| ln_gamma(x - i as f64 / 2.0)).sum::<f64>()
}

/// Multivariate digamma `ψ_d(x) = Σ_i ψ(x - i/2)`.
pub fn mv_digamma(x: f64, d: usize) -> f64 {
    (0..d).map(|i| digamma(x - i as f64 / 2.0)).sum()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetrise and raise every eigenvalue to at least `floor`.
pub fn clamp_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// Frobenius-nearest positive semidefinite matrix.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    clamp_eigenvalues(m, 0.0)
}

/// Lower-triangular `L` with non-negative diagonal such that `L Lᵀ = m` for a PSD `m`.
///
/// Works for singular matrices, where a plain Cholesky factorisation fails.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    // m = Bᵀ B with B = diag(root) Uᵀ; QR of B gives m = Rᵀ R.
    let b = DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    let r = b.qr().r();
    let mut l = r.transpose();
    for j in 0..n {
        if l[(j, j)] < 0.0 {
            for i in 0..n {
                l[(i, j)] = -l[(i, j)];
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            l[(i, j)] = 0.0;
        }
    }
    l
}

fn phi(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.lower_triangle();
    for i in 0..m.nrows() {
        out[(i, i)] *= 0.5;
    }
    out
}

/// Reverse-mode step through `L = chol(Σ)`.
///
/// Given the adjoint of the (lower-triangular) factor, returns the symmetric
/// adjoint of `Σ`.
pub fn cholesky_backward(l: &DMatrix<f64>, grad_l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let p = phi(&(l.transpose() * grad_l.lower_triangle()));
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has a positive diagonal");
    symmetrize(&(l_inv.transpose() * p * &l_inv))
}

/// Gauss–Hermite rule for expectations under a standard normal.
pub fn gauss_hermite(points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(points >= 1);
    let mut jacobi = DMatrix::zeros(points, points);
    for k in 1..points {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..points)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

/// `[a; b]`
pub fn vstack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}
