//! Row-major dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub(crate) fn to_matrix(a: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, a)
}

pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn det(a: &[f64], n: usize) -> f64 {
    to_matrix(a, n).determinant()
}

/// Solve `A x = b`; `None` if singular.
pub fn solve(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    let lu = to_matrix(a, n).lu();
    lu.solve(&DVector::from_column_slice(b)).map(|x| x.as_slice().to_vec())
}

pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    to_matrix(a, n).try_inverse().map(|m| from_matrix(&m))
}

pub fn is_spd(a: &[f64], n: usize) -> bool {
    nalgebra::Cholesky::new(to_matrix(a, n)).is_some()
}

pub fn mat_vec(a: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    (0..a.len() / n).map(|i| a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut e: Vec<f64> = nalgebra::SymmetricEigen::new(to_matrix(a, n)).eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

/// 2-norm condition number from the singular values.
pub fn condition_number(a: &[f64], rows: usize, cols: usize) -> f64 {
    let m = DMatrix::from_row_slice(rows, cols, a);
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Weighted least squares `min sum w_i (y_i - X_i beta)^2`; returns `(beta, (X^T W X)^{-1})`.
pub fn weighted_least_squares(x: &[f64], rows: usize, cols: usize, y: &[f64], w: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut xtwx = vec![0.0; cols * cols];
    let mut xtwy = vec![0.0; cols];
    for i in 0..rows {
        let xi = &x[i * cols..(i + 1) * cols];
        for a in 0..cols {
            xtwy[a] += w[i] * xi[a] * y[i];
            for b in 0..cols {
                xtwx[a * cols + b] += w[i] * xi[a] * xi[b];
            }
        }
    }
    let inv = inverse(&xtwx, cols)?;
    let beta = mat_vec(&inv, cols, &xtwy);
    Some((beta, inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_and_det() {
        let a = [2.0, 1.0, 1.0, 3.0];
        assert!((det(&a, 2) - 5.0).abs() < 1e-14);
        let x = solve(&a, 2, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
        assert!(solve(&[1.0, 2.0, 2.0, 4.0], 2, &[1.0, 1.0]).is_none());
        assert!(is_spd(&a, 2));
        assert!(!is_spd(&[1.0, 2.0, 2.0, 1.0], 2));
    }

    #[test]
    fn wls_recovers_line() {
        let xs: Vec<f64> = (0..5).flat_map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..5).map(|i| 2.0 - 0.5 * i as f64).collect();
        let (b, _) = weighted_least_squares(&xs, 5, 2, &y, &[1.0; 5]).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] + 0.5).abs() < 1e-12);
    }
}
