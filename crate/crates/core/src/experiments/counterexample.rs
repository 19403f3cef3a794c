//! Failure of a naive inverse-function rule for Clarke Jacobians.
//!
//! The piecewise linear homeomorphism Phi(x, y) = (|x| + y, 2x + |y|) has a
//! Clarke Jacobian at the origin generated by four matrices spanning an
//! affine set of dimension 2, all invertible. Its inverse Psi is also
//! piecewise linear, but the generators of its Clarke Jacobian at the
//! origin span an affine set of dimension 3, so the Jacobian of the inverse
//! is not the set of inverses: some inverted generator leaves the affine
//! hull entirely. Conservative Jacobians absorb exactly this slack.

use crate::linalg::{self, Matrix};

/// Rank tolerance for the affine-dimension computations.
const DIM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct CounterexampleReport {
    /// Generators of the Clarke Jacobian of Phi at 0, one per orthant.
    pub phi_generators: Vec<Matrix>,
    /// Generators of the Clarke Jacobian of the inverse map at 0.
    pub psi_generators: Vec<Matrix>,
    /// Inverses of the Phi generators, computed by linear solve.
    pub phi_inverses: Vec<Matrix>,
    /// The same inverses in closed form.
    pub expected_inverses: Vec<Matrix>,
    pub dim_phi: usize,
    pub dim_psi: usize,
    /// Largest entrywise gap between computed and closed-form inverses.
    pub max_inverse_error: f64,
    /// At least one inverted generator lies outside the affine hull of the
    /// Phi generators.
    pub inverse_outside_affine_hull: bool,
}

fn m2(a: f64, b: f64, c: f64, d: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[a, b, c, d])
}

/// Builds both generator families, inverts the forward one, and measures
/// the affine dimensions.
pub fn run_counterexample() -> CounterexampleReport {
    // orthant order: (+,+), (+,-), (-,-), (-,+)
    let m1 = m2(1.0, 1.0, 2.0, 1.0);
    let m2_ = m2(1.0, 1.0, 2.0, -1.0);
    let m3 = m2(-1.0, 1.0, 2.0, -1.0);
    let m4 = m2(-1.0, 1.0, 2.0, 1.0);
    let phi_generators = vec![m1.clone(), m2_.clone(), m3.clone(), m4.clone()];

    // closed-form inverses: m1 and m3 swap, m2 and m4 invert to a third of
    // themselves
    let expected_inverses = vec![m3.clone(), &m2_ / 3.0, m1.clone(), &m4 / 3.0];
    let phi_inverses: Vec<Matrix> = phi_generators
        .iter()
        .map(|m| {
            linalg::lu_solve(m, &Matrix::identity(2, 2)).expect("generators are invertible")
        })
        .collect();
    let max_inverse_error = phi_inverses
        .iter()
        .zip(&expected_inverses)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);

    let psi_generators = vec![m1, m3, &m4 / 3.0, &m2_ / 3.0];

    let dim_phi = linalg::affine_dimension(&phi_generators, DIM_TOL);
    let dim_psi = linalg::affine_dimension(&psi_generators, DIM_TOL);

    let inverse_outside_affine_hull = phi_inverses.iter().any(|inv| {
        let mut pts = phi_generators.clone();
        pts.push(inv.clone());
        linalg::affine_dimension(&pts, DIM_TOL) > dim_phi
    });

    CounterexampleReport {
        phi_generators,
        psi_generators,
        phi_inverses,
        expected_inverses,
        dim_phi,
        dim_psi,
        max_inverse_error,
        inverse_outside_affine_hull,
    }
}
