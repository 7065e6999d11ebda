//! Small dense helpers over nalgebra.

use nalgebra::{DMatrix, DVector};

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Eigenvalues of a symmetric matrix, ascending; diagonal input is returned exactly.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = if is_diagonal(m) {
        m.diagonal().iter().copied().collect()
    } else {
        let sym = (m + m.transpose()) * 0.5;
        sym.symmetric_eigenvalues().iter().copied().collect()
    };
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = sym_eigenvalues(m);
    (ev[0], ev[ev.len() - 1])
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = sym_eig_range(m);
    lo.abs().max(hi.abs())
}

pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Principal submatrix on `idx`.
pub fn restrict(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}
