//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Real 2n x 2m embedding of a complex map acting on `[re; im]` stacks.
pub fn complex_to_real_block(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let z = a[(i, j)];
            out[(i, j)] = z.re;
            out[(i, c + j)] = -z.im;
            out[(r + i, j)] = z.im;
            out[(r + i, c + j)] = z.re;
        }
    }
    out
}

pub fn split_complex(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

pub fn join_complex(w: &DVector<f64>) -> DVector<Complex64> {
    let n = w.len() / 2;
    DVector::from_fn(n, |i, _| Complex64::new(w[i], w[n + i]))
}

/// 2-norm condition number from singular values; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical rank using the usual `max(m,n) * eps * sigma_max` cutoff.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * sv.max();
    sv.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis for the column space of `a`.
pub fn orthonormal_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * svd.singular_values.max();
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tol)
        .map(|(i, _)| i)
        .collect();
    DMatrix::from_fn(a.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn max_abs_c(v: &DVector<Complex64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_block_matches_complex_product() {
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(1.0, 2.0),
                Complex64::new(-0.5, 0.3),
                Complex64::new(0.0, 1.0),
                Complex64::new(2.0, -1.0),
            ],
        );
        let v = DVector::from_vec(vec![Complex64::new(0.3, -0.7), Complex64::new(1.1, 0.2)]);
        let direct = &a * &v;
        let via_real = complex_to_real_block(&a) * split_complex(&v);
        let back = join_complex(&via_real);
        assert!((direct - back).norm() < 1e-14);
    }

    #[test]
    fn orthogonal_matrix_is_perfectly_conditioned() {
        let (c, s) = (0.3_f64.cos(), 0.3_f64.sin());
        let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!((condition_number(&q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &u * u.transpose();
        assert_eq!(numerical_rank(&a), 1);
        assert_eq!(orthonormal_columns(&a).ncols(), 1);
    }
}
