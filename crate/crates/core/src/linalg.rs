//! Dense real linear algebra used by every other module: LU solves with a
//! reciprocal condition gate, smallest symmetric eigenvalue, affine dimension
//! of point sets, and a truncated pseudo-inverse for force-mode fallbacks.
//!
//! All instances in this crate are desk-scale dense matrices, so conditioning
//! is estimated from an explicitly computed inverse rather than a 1-norm
//! estimator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default gate on the reciprocal condition estimate of a solve.
pub const DEFAULT_RCOND_TOL: f64 = 1e-12;

/// Rejects matrices carrying NaN or infinite entries.
pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::DomainError(format!("{what} contains non-finite entries")))
    }
}

pub fn ensure_finite_vec(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::DomainError(format!("{what} contains non-finite entries")))
    }
}

fn norm_1(m: &Matrix) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Estimate of `1 / (|A|_1 |A^-1|_1)`. Returns 0 for exactly singular input.
pub fn rcond_estimate(a: &Matrix) -> f64 {
    assert!(a.is_square(), "rcond_estimate requires a square matrix");
    if a.nrows() == 0 {
        return 1.0;
    }
    match a.clone().try_inverse() {
        Some(inv) => {
            let denom = norm_1(a) * norm_1(&inv);
            if denom.is_finite() && denom > 0.0 {
                1.0 / denom
            } else {
                0.0
            }
        }
        None => 0.0,
    }
}

/// Solves `A X = B` by LU with partial pivoting, gated on the reciprocal
/// condition estimate of `A`.
pub fn lu_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    lu_solve_with_tol(a, b, DEFAULT_RCOND_TOL)
}

pub fn lu_solve_with_tol(a: &Matrix, b: &Matrix, rcond_tol: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "lu_solve expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "lu_solve: A is {}x{} but B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let rcond = rcond_estimate(a);
    if rcond < rcond_tol {
        return Err(Error::SingularMatrix { rcond, tol: rcond_tol });
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::SingularMatrix { rcond, tol: rcond_tol })
}

/// Convenience wrapper for a single right-hand side.
pub fn lu_solve_vec(a: &Matrix, b: &Vector) -> Result<Vector> {
    let x = lu_solve(a, &Matrix::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(Vector::from_column_slice(x.as_slice()))
}

/// Smallest eigenvalue of a symmetric matrix.
///
/// The input must be symmetric within an absolute tolerance of 1e-10
/// (scaled by its magnitude); it is symmetrized before decomposition.
pub fn symmetric_eig_min(a: &Matrix) -> Result<f64> {
    assert!(a.is_square(), "symmetric_eig_min requires a square matrix");
    let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let mut asym: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Dimension of the affine hull of a set of equally-shaped matrices.
///
/// Each point is vectorized, differences against the first point are stacked,
/// and singular values below `tol * sigma_max` are treated as zero.
pub fn affine_dimension(points: &[Matrix], tol: f64) -> usize {
    assert!(!points.is_empty(), "affine_dimension requires at least one point");
    let base = &points[0];
    let dim = base.nrows() * base.ncols();
    if points.len() == 1 {
        return 0;
    }
    let mut rows = Matrix::zeros(points.len() - 1, dim);
    for (r, p) in points[1..].iter().enumerate() {
        assert_eq!(
            (p.nrows(), p.ncols()),
            (base.nrows(), base.ncols()),
            "affine_dimension points must share a shape"
        );
        let diff = p - base;
        for (c, v) in diff.iter().enumerate() {
            rows[(r, c)] = *v;
        }
    }
    let svd = rows.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > tol * smax).count()
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rcond * sigma_max` truncated to zero. Used by force-mode consumers that
/// deliberately cross singular selections.
pub fn pseudo_inverse(a: &Matrix, rcond: f64) -> Matrix {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rcond * smax;
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut sinv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(a: &Matrix) -> f64 {
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}
