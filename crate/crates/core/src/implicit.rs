//! Implicit differentiation of fixed points and residual equations.
//!
//! Given a residual F(x, z) = 0 with solution map z = G(x), the selection
//! Jacobian of G is -B^-1 A where [A B] is a selection in the generalized
//! Jacobian of F at (x, G(x)), split at the x/z column boundary. The solve
//! is gated on a reciprocal condition estimate of B; a force mode exists so
//! pathological dynamics can cross the gate deliberately.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector, DEFAULT_RCOND_TOL};
use crate::tape::{SelectionPolicy, Tape};

/// Fixed-point iteration settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub max_iterations: usize,
    /// Sup-norm bound on both the update step and the residual z - f(z).
    pub tolerance: f64,
    /// Picard damping in (0, 1]: z <- (1 - damping) z + damping f(z).
    pub damping: f64,
    /// Anderson acceleration history depth; 0 disables acceleration.
    pub anderson_depth: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            max_iterations: 10_000,
            tolerance: 1e-10,
            damping: 1.0,
            anderson_depth: 5,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("fixed point tolerance must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidConfig("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Plain damped Picard, no acceleration.
    pub fn picard() -> Self {
        FixedPointConfig { anderson_depth: 0, ..Default::default() }
    }
}

/// Outcome of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct FixedPointSolution {
    pub z: Vector,
    pub iterations: usize,
    /// Final sup-norm of z - f(z).
    pub residual: f64,
}

/// Iterates z <- f(z) to a fixed point from `z0` using damped Picard steps
/// with optional Anderson (type II) acceleration.
pub fn solve_fixed_point_fn(
    f: impl Fn(&Vector) -> Result<Vector>,
    z0: &Vector,
    cfg: &FixedPointConfig,
) -> Result<FixedPointSolution> {
    cfg.validate()?;
    let m = z0.len();
    let mut z = z0.clone();
    // rolling history of iterates and their residuals g(z) = f(z) - z
    let mut zs: Vec<Vector> = Vec::new();
    let mut gs: Vec<Vector> = Vec::new();
    let mut residual = f64::INFINITY;
    for it in 0..cfg.max_iterations {
        let fz = f(&z)?;
        linalg::ensure_finite_vec(&fz, "fixed point iterate")?;
        let g = &fz - &z;
        residual = g.amax();
        if residual <= cfg.tolerance {
            return Ok(FixedPointSolution { z, iterations: it, residual });
        }
        let mut next = &z + &g * cfg.damping;
        if cfg.anderson_depth > 0 {
            zs.push(z.clone());
            gs.push(g.clone());
            if zs.len() > cfg.anderson_depth + 1 {
                zs.remove(0);
                gs.remove(0);
            }
            let k = zs.len() - 1;
            if k >= 1 {
                // least-squares on residual differences; fall back to the
                // Picard step when the normal equations are degenerate
                let mut dg = Matrix::zeros(m, k);
                let mut dz = Matrix::zeros(m, k);
                for j in 0..k {
                    dg.set_column(j, &(&gs[j + 1] - &gs[j]));
                    dz.set_column(j, &(&zs[j + 1] - &zs[j]));
                }
                let gram = dg.transpose() * &dg;
                let rhs = dg.transpose() * &g;
                if let Ok(gamma) = linalg::lu_solve_with_tol(
                    &gram,
                    &Matrix::from_column_slice(k, 1, rhs.as_slice()),
                    1e-14,
                ) {
                    let gamma = Vector::from_column_slice(gamma.as_slice());
                    let cand = &z + &g - (&dz + &dg) * &gamma;
                    if cand.iter().all(|v| v.is_finite()) {
                        next = cand;
                    }
                }
            }
        }
        z = next;
    }
    Err(Error::NoConvergence { iterations: cfg.max_iterations, residual })
}

/// Fixed point of an update map given as a tape on the stacked input (z, x).
pub fn solve_fixed_point(
    update_map: &Tape,
    x: &Vector,
    z0: &Vector,
    cfg: &FixedPointConfig,
) -> Result<FixedPointSolution> {
    let m = z0.len();
    if update_map.input_arity() != m + x.len() {
        return Err(Error::ShapeMismatch(format!(
            "update map arity {} != |z| + |x| = {}",
            update_map.input_arity(),
            m + x.len()
        )));
    }
    solve_fixed_point_fn(
        |z| {
            let mut zx = Vector::zeros(m + x.len());
            zx.rows_mut(0, m).copy_from(z);
            zx.rows_mut(m, x.len()).copy_from(x);
            let out = update_map.eval(&zx)?;
            if out.len() != m {
                return Err(Error::ShapeMismatch(format!(
                    "update map output arity {} != |z| = {m}",
                    out.len()
                )));
            }
            Ok(out)
        },
        z0,
        cfg,
    )
}

/// A residual equation F(x, z) = 0 with differentiation settings.
///
/// The residual tape takes the stacked vector (x, z) of arity n + m and
/// outputs m values.
#[derive(Debug, Clone)]
pub struct ImplicitProblem {
    pub residual: Tape,
    pub n: usize,
    pub m: usize,
    pub policy: SelectionPolicy,
    pub rcond_tol: f64,
    /// Bypasses the invertibility gate; only the exactly-singular case still
    /// errors so callers can substitute a pseudo-inverse deliberately.
    pub force_mode: bool,
}

impl ImplicitProblem {
    pub fn new(residual: Tape, n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidConfig("implicit problem needs n, m >= 1".into()));
        }
        if residual.input_arity() != n + m {
            return Err(Error::ShapeMismatch(format!(
                "residual arity {} != n + m = {}",
                residual.input_arity(),
                n + m
            )));
        }
        if residual.output_arity() != m {
            return Err(Error::ShapeMismatch(format!(
                "residual output arity {} != m = {m}",
                residual.output_arity()
            )));
        }
        Ok(ImplicitProblem {
            residual,
            n,
            m,
            policy: SelectionPolicy::default(),
            rcond_tol: DEFAULT_RCOND_TOL,
            force_mode: false,
        })
    }

    pub fn with_policy(mut self, policy: SelectionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_rcond_tol(mut self, tol: f64) -> Self {
        self.rcond_tol = tol;
        self
    }

    pub fn forced(mut self) -> Self {
        self.force_mode = true;
        self
    }

    fn stacked(&self, x: &Vector, z: &Vector) -> Result<Vector> {
        if x.len() != self.n || z.len() != self.m {
            return Err(Error::ShapeMismatch(format!(
                "expected |x| = {}, |z| = {}; got {}, {}",
                self.n,
                self.m,
                x.len(),
                z.len()
            )));
        }
        let mut xz = Vector::zeros(self.n + self.m);
        xz.rows_mut(0, self.n).copy_from(x);
        xz.rows_mut(self.n, self.m).copy_from(z);
        Ok(xz)
    }

    pub fn residual_value(&self, x: &Vector, z: &Vector) -> Result<Vector> {
        self.residual.eval(&self.stacked(x, z)?)
    }

    /// The selection [A B] of the residual Jacobian at (x, z), split at the
    /// x/z column boundary: A is m x n, B is m x m.
    pub fn residual_jacobian_split(&self, x: &Vector, z: &Vector) -> Result<(Matrix, Matrix)> {
        let xz = self.stacked(x, z)?;
        let j = self.residual.jacobian_selection(&xz, &self.policy)?.matrix;
        let a = j.columns(0, self.n).into_owned();
        let b = j.columns(self.n, self.m).into_owned();
        Ok((a, b))
    }
}

/// A selection Jacobian of the implicit solution map, with conditioning
/// metadata from the inner solve.
#[derive(Debug, Clone)]
pub struct ImplicitSelection {
    /// dz/dx selection, m x n.
    pub matrix: Matrix,
    /// Reciprocal condition estimate of the z-block B.
    pub rcond_b: f64,
}

/// -B^-1 A at a solved point; errors when the gate rejects B.
pub fn implicit_jacobian_selection(
    problem: &ImplicitProblem,
    x: &Vector,
    z: &Vector,
) -> Result<Matrix> {
    Ok(implicit_jacobian_selection_full(problem, x, z)?.matrix)
}

pub fn implicit_jacobian_selection_full(
    problem: &ImplicitProblem,
    x: &Vector,
    z: &Vector,
) -> Result<ImplicitSelection> {
    let (a, b) = problem.residual_jacobian_split(x, z)?;
    let rcond_b = linalg::rcond_estimate(&b);
    if !problem.force_mode && rcond_b < problem.rcond_tol {
        return Err(Error::InvertibilityFailure { rcond: rcond_b, tol: problem.rcond_tol });
    }
    // in force mode an exactly singular B still cannot be LU-solved
    let solved = linalg::lu_solve_with_tol(&b, &a, 0.0).map_err(|e| {
        if problem.force_mode {
            Error::SingularMatrix { rcond: rcond_b, tol: problem.rcond_tol }
        } else {
            e
        }
    })?;
    Ok(ImplicitSelection { matrix: -solved, rcond_b })
}

/// Selection Jacobian of the inverse map at y: inverts the selection of phi
/// at the preimage `psi_y`. Requires phi(psi_y) = y to `residual_tol`.
pub fn inverse_jacobian_selection(
    phi: &Tape,
    y: &Vector,
    psi_y: &Vector,
    policy: &SelectionPolicy,
    rcond_tol: f64,
    residual_tol: f64,
) -> Result<Matrix> {
    let fy = phi.eval(psi_y)?;
    let res = (&fy - y).amax();
    if res > residual_tol {
        return Err(Error::InvalidConfig(format!(
            "psi_y is not a preimage of y (residual {res:.3e} > {residual_tol:.3e})"
        )));
    }
    let a = phi.jacobian_selection(psi_y, policy)?.matrix;
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "inverse differentiation needs a square Jacobian, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let rcond = linalg::rcond_estimate(&a);
    if rcond < rcond_tol {
        return Err(Error::InvertibilityFailure { rcond, tol: rcond_tol });
    }
    linalg::lu_solve_with_tol(&a, &Matrix::identity(a.nrows(), a.ncols()), 0.0)
}
