//! Dense least-squares helpers built on nalgebra's SVD.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-12;

/// Minimizes `||A x - b||^2 + sum_k penalty[k] * x_k^2` by an SVD of the
/// augmented system `[A; diag(sqrt(penalty))]`.
///
/// Fails with [`Error::Underdetermined`] when the augmented system is
/// numerically rank deficient.
pub fn tikhonov_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, penalty: &[f64]) -> Result<DVector<f64>> {
    let (m, k) = a.shape();
    if b.len() != m || penalty.len() != k {
        return Err(Error::InvalidArgument(format!(
            "least-squares shapes disagree: A is {m}x{k}, b has {}, penalty has {}",
            b.len(),
            penalty.len()
        )));
    }
    let regularized = penalty.iter().any(|&p| p > 0.0);
    if !regularized && m < k {
        return Err(Error::Underdetermined(format!(
            "{m} equations for {k} unknowns without regularization"
        )));
    }
    let (aug, rhs) = if regularized {
        let mut aug = DMatrix::zeros(m + k, k);
        aug.rows_mut(0, m).copy_from(a);
        for (j, &p) in penalty.iter().enumerate() {
            aug[(m + j, j)] = p.max(0.0).sqrt();
        }
        let mut rhs = DVector::zeros(m + k);
        rhs.rows_mut(0, m).copy_from(b);
        (aug, rhs)
    } else {
        (a.clone(), b.clone())
    };
    solve_svd(aug, &rhs)
}

fn solve_svd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let k = a.ncols();
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return Err(Error::Underdetermined(format!(
            "rank-deficient system (singular values {smin:e} .. {smax:e})"
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut coeffs = u.tr_mul(b);
    for (c, s) in coeffs.iter_mut().zip(svd.singular_values.iter()) {
        *c /= s;
    }
    let x = v_t.tr_mul(&coeffs);
    debug_assert_eq!(x.len(), k);
    Ok(x)
}

/// Solves `min ||X W - Y||_F` for a matrix of right-hand sides, sharing one SVD
/// of `X` across all columns of `Y`.
pub fn lstsq_multi(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, k) = x.shape();
    if y.nrows() != m {
        return Err(Error::InvalidArgument(format!(
            "least-squares shapes disagree: X is {m}x{k}, Y has {} rows",
            y.nrows()
        )));
    }
    if m < k {
        return Err(Error::Underdetermined(format!("{m} samples for {k} unknowns")));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return Err(Error::Underdetermined(format!(
            "rank-deficient design (singular values {smin:e} .. {smax:e})"
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut c = u.tr_mul(y);
    for (mut row, s) in c.row_iter_mut().zip(svd.singular_values.iter()) {
        row /= *s;
    }
    Ok(v_t.tr_mul(&c))
}

/// Condition number (largest / smallest singular value).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    sv.max() / sv.min()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_system_is_solved() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![0.5, -1.5]);
        let b = &a * &x;
        let got = tikhonov_lstsq(&a, &b, &[0.0, 0.0]).unwrap();
        assert!((got - x).amax() < 1e-14);
    }

    #[test]
    fn matches_normal_equations_with_penalty() {
        let a = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j) as f64).sin());
        let b = DVector::from_fn(7, |i, _| (i as f64).cos());
        let penalty = [0.1, 0.0, 2.0];
        let got = tikhonov_lstsq(&a, &b, &penalty).unwrap();
        let mut normal = a.tr_mul(&a);
        for j in 0..3 {
            normal[(j, j)] += penalty[j];
        }
        let want = normal.lu().solve(&a.tr_mul(&b)).unwrap();
        assert!((got - want).amax() < 1e-12);
    }

    #[test]
    fn underdetermined_is_reported() {
        let a = DMatrix::from_element(2, 3, 1.0);
        let b = DVector::zeros(2);
        assert!(matches!(
            tikhonov_lstsq(&a, &b, &[0.0; 3]),
            Err(Error::Underdetermined(_))
        ));
        let rank1 = DMatrix::from_element(4, 2, 1.0);
        assert!(matches!(
            tikhonov_lstsq(&rank1, &DVector::zeros(4), &[0.0; 2]),
            Err(Error::Underdetermined(_))
        ));
        // Regularization makes the same system solvable.
        assert!(tikhonov_lstsq(&a, &b, &[1.0; 3]).is_ok());
    }

    #[test]
    fn multi_rhs_matches_single() {
        let x = DMatrix::from_fn(9, 4, |i, j| ((i * 31 + j * 17) % 13) as f64 + (i * j) as f64 * 0.1);
        let y = DMatrix::from_fn(9, 3, |i, j| (i as f64 - j as f64) * 0.1);
        let w = lstsq_multi(&x, &y).unwrap();
        for c in 0..3 {
            let single = tikhonov_lstsq(&x, &y.column(c).into_owned(), &[0.0; 4]).unwrap();
            assert!((w.column(c) - single).amax() < 1e-12);
        }
    }
}
