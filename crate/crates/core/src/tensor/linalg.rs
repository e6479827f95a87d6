//! Small dense factorizations used by the prototype metric.

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = a`.
///
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky(a: &DenseMatrix) -> Result<Option<DenseMatrix>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("cholesky", format!("{}x{} is not square", n, a.cols())));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Ok(None);
        }
        let pivot = diag.sqrt();
        l.set(j, j, pivot);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / pivot);
        }
    }
    Ok(Some(l))
}

/// Solves `L·z = b` in place for lower-triangular `L`.
pub fn solve_lower_in_place(l: &DenseMatrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let row = l.row(i);
        let mut s = b[i];
        for k in 0..i {
            s -= row[k] * b[k];
        }
        b[i] = s / row[i];
    }
}

/// Solves `Lᵀ·z = b` in place for lower-triangular `L`.
pub fn solve_lower_transpose_in_place(l: &DenseMatrix, b: &mut [f64]) {
    let n = l.rows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l.get(k, i) * b[k];
        }
        b[i] = s / l.get(i, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = DenseMatrix::from_rows(&[[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap().unwrap();
        assert!(l.matmul_t(&l).unwrap().max_abs_diff(&a) < 1e-12);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(l.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(cholesky(&a).unwrap().is_none());
        assert!(cholesky(&DenseMatrix::zeros(2, 2)).unwrap().is_none());
    }

    #[test]
    fn triangular_solves() {
        let l = DenseMatrix::from_rows(&[[2.0, 0.0], [1.0, 3.0]]).unwrap();
        let mut b = vec![4.0, 11.0];
        solve_lower_in_place(&l, &mut b);
        assert_eq!(b, vec![2.0, 3.0]);
        let mut c = vec![7.0, 9.0];
        solve_lower_transpose_in_place(&l, &mut c);
        // Lᵀ = [[2, 1], [0, 3]] -> z1 = 3, z0 = (7 - 3)/2
        assert_eq!(c, vec![2.0, 3.0]);
    }
}
