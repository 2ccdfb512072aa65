//! Small dense linear-algebra helpers shared by the other modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}

/// Operator norm induced by the max-norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, &s| acc.min(s))
}

/// Orthonormal basis (as columns) of the range of a projection matrix.
///
/// Nonzero singular values of a projection are at least one, so the cut at
/// one half separates the range from the kernel robustly.
pub fn projection_range_basis(p: &DMatrix<f64>) -> DMatrix<f64> {
    let k = p.nrows();
    let svd = p.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let cols: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.5)
        .map(|(i, _)| i)
        .collect();
    DMatrix::from_fn(k, cols.len(), |r, c| u[(r, cols[c])])
}

pub fn projection_rank(p: &DMatrix<f64>) -> usize {
    p.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > 0.5)
        .count()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parse("matrix has nonfinite entries".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn vector_to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
