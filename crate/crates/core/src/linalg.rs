//! Small dense kernels used by the square-root recursions.
//!
//! Everything here works on `nalgebra` dynamic matrices; the state dimension
//! is at most 8, so the matrices involved are tiny.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Upper-triangular factor `R` of the Householder QR decomposition of `a`.
///
/// `a` must have at least as many rows as columns. Only `R` (ncols × ncols) is
/// kept; rows are sign-flipped so the diagonal is nonnegative, which makes the
/// factor unique whenever `a` has full column rank.
pub fn qr_upper(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    assert!(m >= n, "qr_upper needs rows >= cols, got {m}x{n}");
    let mut w = a.clone();
    let mut v = vec![0.0; m];
    for c in 0..n {
        let norm = (c..m).map(|i| w[(i, c)] * w[(i, c)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if w[(c, c)] > 0.0 { -norm } else { norm };
        for i in c..m {
            v[i] = w[(i, c)];
        }
        v[c] -= alpha;
        let vnorm2: f64 = (c..m).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        w[(c, c)] = alpha;
        for i in c + 1..m {
            w[(i, c)] = 0.0;
        }
        for col in c + 1..n {
            let dot: f64 = (c..m).map(|i| v[i] * w[(i, col)]).sum();
            let s = 2.0 * dot / vnorm2;
            for i in c..m {
                w[(i, col)] -= s * v[i];
            }
        }
    }
    let mut r = w.rows(0, n).upper_triangle();
    for i in 0..n {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
        }
    }
    r
}

/// Lower-triangular `L` with nonnegative diagonal such that `L Lᵀ = X Xᵀ`.
///
/// `x` is the "pre-array" of a square-root update: n × m with m ≥ n.
pub fn lower_factor(x: &DMatrix<f64>) -> DMatrix<f64> {
    qr_upper(&x.transpose()).transpose()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Dense covariance from its lower factor.
pub fn square(factor: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(factor * factor.transpose()))
}

pub fn is_lower_triangular(a: &DMatrix<f64>) -> bool {
    let (r, c) = a.shape();
    (0..r).all(|i| (i + 1..c).all(|j| a[(i, j)] == 0.0))
}

fn check_diag(l: &DMatrix<f64>) -> Result<()> {
    let scale = l.diagonal().amax();
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if !d.is_finite() || d == 0.0 || d.abs() <= scale * 1e-300 {
            return Err(Error::conditioning(format!(
                "singular triangular factor (diagonal entry {i} = {d:e})"
            )));
        }
    }
    Ok(())
}

/// Solve `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_diag(l)?;
    let mut x = b.clone();
    if !l.solve_lower_triangular_mut(&mut x) {
        return Err(Error::conditioning("lower-triangular solve failed"));
    }
    Ok(x)
}

/// Solve `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transposed(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_diag(l)?;
    let mut x = b.clone();
    if !l.tr_solve_lower_triangular_mut(&mut x) {
        return Err(Error::conditioning("transposed triangular solve failed"));
    }
    Ok(x)
}

/// `B (L Lᵀ)⁻¹` computed with two triangular solves.
pub fn right_divide_by_square(b: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    // (L Lᵀ)⁻¹ Bᵀ = L⁻ᵀ (L⁻¹ Bᵀ)
    let y = solve_lower(l, &b.transpose())?;
    Ok(solve_lower_transposed(l, &y)?.transpose())
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::linalg::Cholesky::new(symmetrize(a)).map(|c| c.l())
}

/// Cholesky with a `jitter · trace` diagonal bump when `a` is only semidefinite.
///
/// A matrix that is exactly zero yields a zero factor.
pub fn cholesky_psd(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    if let Some(l) = cholesky(a) {
        if l.diagonal().iter().all(|&x| x > 0.0) {
            return Some(l);
        }
    }
    let tr = a.trace();
    if tr == 0.0 && a.iter().all(|&x| x == 0.0) {
        return Some(DMatrix::zeros(a.nrows(), a.ncols()));
    }
    let bump = DMatrix::identity(a.nrows(), a.ncols()) * (jitter * tr.abs());
    cholesky(&(a + bump))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a).symmetric_eigenvalues().min()
}

pub fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    let num = (a - b).norm();
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}

pub fn vec_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = b.norm();
    let num = (a - b).norm();
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}
