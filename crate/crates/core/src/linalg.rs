//! Thin helpers over nalgebra for the few dense factorizations the crate needs.

use nalgebra::{DMatrix, DVector};

use crate::error::{PscError, Result};
use crate::scalar::Scalar;

/// Builds a matrix from row-major data.
pub fn from_row_major<T: Scalar>(rows: usize, cols: usize, data: &[T]) -> DMatrix<T> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Flattens a matrix row-major.
pub fn to_row_major<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix with eigenvalues in descending
/// order and each eigenvector's first non-negligible entry made positive.
#[derive(Debug, Clone)]
pub struct SortedEigen<T: Scalar> {
    pub values: Vec<T>,
    /// Columns are eigenvectors.
    pub vectors: DMatrix<T>,
}

pub fn symmetric_eigen_sorted<T: Scalar>(m: &DMatrix<T>) -> Result<SortedEigen<T>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(PscError::Shape(format!("eigendecomposition of non-square {}x{}", n, m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite_value()) {
        return Err(PscError::Numerical("eigendecomposition of non-finite matrix".into()));
    }
    // symmetrize so tiny asymmetries from accumulation do not leak in
    let sym = (m + m.transpose()) * T::of(0.5);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let mut col = eig.eigenvectors.column(src).clone_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(SortedEigen { values, vectors })
}

/// Makes the first entry whose magnitude exceeds a small threshold positive.
pub fn fix_sign<T: Scalar>(v: &mut DVector<T>) {
    let scale = v.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
    let threshold = scale * T::of(1e-8);
    if let Some(first) = v.iter().copied().find(|x| x.abs() > threshold) {
        if first < T::zero() {
            v.neg_mut();
        }
    }
}

/// Lower Cholesky factor, row-major, or `None` when the matrix is not
/// numerically positive definite.
pub fn cholesky_lower<T: Scalar>(m: &DMatrix<T>) -> Option<DMatrix<T>> {
    let chol = m.clone().cholesky()?;
    let l = chol.l();
    if l.diagonal().iter().all(|d| *d > T::zero() && d.is_finite_value()) {
        Some(l)
    } else {
        None
    }
}

/// Solves `L y = b` for lower-triangular `L` (forward substitution).
pub fn forward_substitute<T: Scalar>(l: &DMatrix<T>, b: &[T], out: &mut [T]) {
    let n = l.nrows();
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[(i, j)] * out[j];
        }
        out[i] = acc / l[(i, i)];
    }
}

pub fn max_abs_deviation_from_identity<T: Scalar>(m: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let target = if r == c { T::one() } else { T::zero() };
            worst = worst.max((m[(r, c)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_is_sorted_descending_with_sign_fixed() {
        let m = from_row_major(3, 3, &[1.0_f64, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let e = symmetric_eigen_sorted(&m).unwrap();
        assert_eq!(e.values.len(), 3);
        assert!((e.values[0] - 5.0).abs() < 1e-12);
        assert!((e.values[2] - 1.0).abs() < 1e-12);
        assert!((e.vectors[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_substitution_matches_direct_solve() {
        let l = from_row_major(2, 2, &[2.0_f64, 0.0, 1.0, 4.0]);
        let mut y = [0.0; 2];
        forward_substitute(&l, &[4.0, 10.0], &mut y);
        assert_eq!(y, [2.0, 2.0]);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = from_row_major(2, 2, &[1.0_f64, 2.0, 2.0, 1.0]);
        assert!(cholesky_lower(&m).is_none());
    }
}
