//! Small dense solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{estimation, invalid, Result};

/// Solve `a x = b` for symmetric positive-definite `a` by Cholesky, adding a
/// growing diagonal jitter when the factorization fails.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return invalid("dimension mismatch in symmetric solve");
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return invalid("non-finite entries in symmetric solve");
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let p = a.nrows().max(1);
    let base = (a.trace().abs() / p as f64).max(1e-300);
    let mut jitter = 1e-12 * base;
    for _ in 0..12 {
        let mut m = a.clone();
        for i in 0..a.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            log::warn!("symmetric solve needed diagonal jitter {jitter:e}");
            return Ok(ch.solve(b));
        }
        jitter *= 10.0;
    }
    estimation("matrix is not positive definite")
}

/// Minimum-norm least-squares solution via the SVD; singular values below
/// `1e-10 * max` are treated as zero.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return invalid("dimension mismatch in least squares");
    }
    if a.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let eps = (1e-10 * smax).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).or_else(|e| estimation(format!("svd solve failed: {e}")))
}
