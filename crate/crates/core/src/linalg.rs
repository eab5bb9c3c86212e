//! Thin bridge to `nalgebra` for the few dense factorizations we need.
//! Inputs are converted to `f64`, factorized, and converted back.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub(crate) fn to_na<T: Real>(a: ArrayView2<T>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]].as_f64())
}

pub(crate) fn from_na<T: Real>(m: &DMatrix<f64>) -> Array2<T> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| T::lit(m[(i, j)]))
}

/// Singular values, largest first.
pub fn singular_values<T: Real>(a: ArrayView2<T>) -> Vec<T> {
    if a.is_empty() {
        return Vec::new();
    }
    let svd = to_na(a).svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s.into_iter().map(T::lit).collect()
}

pub fn operator_norm<T: Real>(a: ArrayView2<T>) -> T {
    singular_values(a).first().copied().unwrap_or_else(T::zero)
}

/// Replaces every singular value above `bound` by `bound`.
pub fn clip_singular_values<T: Real>(a: ArrayView2<T>, bound: T) -> Result<Array2<T>> {
    if a.is_empty() || operator_norm(a) <= bound * (T::one() + T::lit(1e-12)) {
        return Ok(a.to_owned());
    }
    let mut svd = to_na(a).svd(true, true);
    let b = bound.as_f64();
    for s in svd.singular_values.iter_mut() {
        if *s > b {
            *s = b;
        }
    }
    let m = svd
        .recompose()
        .map_err(|e| Error::Solver(format!("svd recomposition failed: {e}")))?;
    Ok(from_na(&m))
}

/// Minimum-norm least-squares solution of `a x ~= b` through the SVD.
pub fn lstsq_min_norm<T: Real>(a: ArrayView2<T>, b: ArrayView1<T>) -> Result<Array1<T>> {
    if a.nrows() != b.len() {
        return Err(Error::Argument(format!(
            "design has {} rows but {} targets",
            a.nrows(),
            b.len()
        )));
    }
    let m = to_na(a);
    let rhs = nalgebra::DVector::from_iterator(b.len(), b.iter().map(|v| v.as_f64()));
    let svd = m.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = smax * f64::EPSILON * (a.nrows().max(a.ncols()) as f64);
    let x = svd
        .solve(&rhs, tol)
        .map_err(|e| Error::Solver(format!("least squares failed: {e}")))?;
    Ok(x.iter().map(|v| T::lit(*v)).collect())
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd<T: Real>(a: ArrayView2<T>, b: ArrayView1<T>) -> Result<Array1<T>> {
    let m = to_na(a);
    let rhs = nalgebra::DVector::from_iterator(b.len(), b.iter().map(|v| v.as_f64()));
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Solver("matrix is not positive definite".into()))?;
    let x = chol.solve(&rhs);
    Ok(x.iter().map(|v| T::lit(*v)).collect())
}

/// Orthogonal factor of the QR decomposition of a square matrix, with the sign
/// convention `diag(R) >= 0` so the result is a deterministic function of `a`.
pub fn orthogonal_factor<T: Real>(a: ArrayView2<T>) -> Array2<T> {
    let qr = to_na(a).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_na(&q)
}
