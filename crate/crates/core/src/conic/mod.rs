//! Conic optimization layers: the residual map whose zeros are primal-dual
//! KKT points, a semismooth Newton solver for it, and differentiation of the
//! solution map with respect to the problem data (A, b, c).

mod cone;

pub use cone::{moreau_check, Cone, ConeFactor, MoreauReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::implicit::FixedPointConfig;
use crate::linalg::{self, Matrix, Vector};
use crate::tape::SelectionPolicy;

/// min c^T x s.t. Ax + s = b, s in K, with dual variable y in K*.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConicProblem {
    pub a: Matrix,
    pub b: Vector,
    pub c: Vector,
    pub cone: Cone,
}

impl ConicProblem {
    pub fn new(a: Matrix, b: Vector, c: Vector, cone: Cone) -> Result<Self> {
        let (m, n) = (a.nrows(), a.ncols());
        if b.len() != m || c.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "A is {m}x{n} but |b| = {}, |c| = {}",
                b.len(),
                c.len()
            )));
        }
        if cone.dim() != m {
            return Err(Error::ShapeMismatch(format!(
                "cone dimension {} != m = {m}",
                cone.dim()
            )));
        }
        if m == 0 || n == 0 {
            return Err(Error::InvalidConfig("empty conic problem".into()));
        }
        Ok(ConicProblem { a, b, c, cone })
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_variables(&self) -> usize {
        self.a.ncols()
    }

    /// Dimension of the residual variable z = (u, v).
    pub fn residual_dim(&self) -> usize {
        self.num_variables() + self.num_constraints()
    }

    /// Size of the flattened parameter vector (A column-major, then b,
    /// then c).
    pub fn parameter_dim(&self) -> usize {
        let (m, n) = (self.num_constraints(), self.num_variables());
        m * n + m + n
    }

    fn split(&self, z: &Vector) -> Result<(Vector, Vector)> {
        let (m, n) = (self.num_constraints(), self.num_variables());
        if z.len() != n + m {
            return Err(Error::ShapeMismatch(format!(
                "z has length {} but N = {}",
                z.len(),
                n + m
            )));
        }
        Ok((z.rows(0, n).into_owned(), z.rows(n, m).into_owned()))
    }
}

/// A KKT point (x, y, s): x primal, y dual in K*, s slack in K.
#[derive(Debug, Clone)]
pub struct PrimalDualSolution {
    pub x: Vector,
    pub y: Vector,
    pub s: Vector,
    pub z: Vector,
}

/// phi(u, v) = (u, P_{K*}(v), P_{K*}(v) - v): the KKT point encoded by a
/// residual-map zero.
pub fn phi(problem: &ConicProblem, z: &Vector) -> Result<PrimalDualSolution> {
    let (u, v) = problem.split(z)?;
    let y = problem.cone.dual().project(&v)?;
    let s = &y - &v;
    Ok(PrimalDualSolution { x: u, y, s, z: z.clone() })
}

/// N(z) = (Q - I) Pi(z) + V + z where Pi projects (u, v) onto
/// R^n x K* and Q, V assemble the problem data.
pub fn residual_map(problem: &ConicProblem, z: &Vector) -> Result<Vector> {
    let (u, v) = problem.split(z)?;
    let (m, n) = (problem.num_constraints(), problem.num_variables());
    let pv = problem.cone.dual().project(&v)?;
    let mut out = Vector::zeros(n + m);
    // first block: A^T P(v) + c
    let top = problem.a.transpose() * &pv + &problem.c;
    out.rows_mut(0, n).copy_from(&top);
    // second block: -A u - P(v) + b + v
    let bottom = -&problem.a * &u - &pv + &problem.b + &v;
    out.rows_mut(n, m).copy_from(&bottom);
    Ok(out)
}

/// The selection [U | V] of the residual-map Jacobian at z: U (N x N) with
/// respect to z, V (N x (mn + m + n)) with respect to the flattened data.
pub fn residual_jacobian_selection(
    problem: &ConicProblem,
    z: &Vector,
    policy: &SelectionPolicy,
) -> Result<(Matrix, Matrix)> {
    let (u, v) = problem.split(z)?;
    let (m, n) = (problem.num_constraints(), problem.num_variables());
    let nn = n + m;
    let dual = problem.cone.dual();
    let jp = dual.projection_jacobian_selection(&v, policy)?;
    let pv = dual.project(&v)?;

    // U = (Q - I) blkdiag(I, J_P) + I
    let mut q = Matrix::zeros(nn, nn);
    q.view_mut((0, n), (n, m)).copy_from(&problem.a.transpose());
    q.view_mut((n, 0), (m, n)).copy_from(&(-&problem.a));
    let mut pi_jac = Matrix::zeros(nn, nn);
    pi_jac.view_mut((0, 0), (n, n)).copy_from(&Matrix::identity(n, n));
    pi_jac.view_mut((n, n), (m, m)).copy_from(&jp);
    let u_block = (q - Matrix::identity(nn, nn)) * pi_jac + Matrix::identity(nn, nn);

    // parameter block: columns A (column-major), then b, then c
    let mut v_block = Matrix::zeros(nn, problem.parameter_dim());
    for j in 0..n {
        for i in 0..m {
            let col = j * m + i;
            // d(A^T P(v))_j / dA_ij = P(v)_i ; d(-A u)_i / dA_ij = -u_j
            v_block[(j, col)] = pv[i];
            v_block[(n + i, col)] = -u[j];
        }
    }
    for i in 0..m {
        v_block[(n + i, m * n + i)] = 1.0;
    }
    for j in 0..n {
        v_block[(j, m * n + m + j)] = 1.0;
    }
    Ok((u_block, v_block))
}

/// Solves N(z) = 0 by semismooth Newton with backtracking on |N|^2 and a
/// damped fixed-point fallback step z <- z - 0.5 N(z).
pub fn solve_residual(
    problem: &ConicProblem,
    z0: &Vector,
    cfg: &FixedPointConfig,
) -> Result<Vector> {
    cfg.validate()?;
    let policy = SelectionPolicy::default();
    let mut z = z0.clone();
    if z.len() != problem.residual_dim() {
        return Err(Error::ShapeMismatch(format!(
            "z0 has length {} but N = {}",
            z.len(),
            problem.residual_dim()
        )));
    }
    let mut res = residual_map(problem, &z)?;
    for _ in 0..cfg.max_iterations {
        let rnorm = res.amax();
        if rnorm <= cfg.tolerance {
            return Ok(z);
        }
        let (u_block, _) = residual_jacobian_selection(problem, &z, &policy)?;
        let mut stepped = false;
        if let Ok(d) = linalg::lu_solve_with_tol(
            &u_block,
            &Matrix::from_column_slice(z.len(), 1, res.as_slice()),
            1e-13,
        ) {
            let d = Vector::from_column_slice(d.as_slice());
            let base = res.norm_squared();
            let mut tau = 1.0;
            for _ in 0..30 {
                let cand = &z - &d * tau;
                let cres = residual_map(problem, &cand)?;
                if cres.norm_squared() < base * (1.0 - 1e-4 * tau) {
                    z = cand;
                    res = cres;
                    stepped = true;
                    break;
                }
                tau *= 0.5;
            }
        }
        if !stepped {
            z -= &res * 0.5;
            res = residual_map(problem, &z)?;
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iterations,
        residual: res.amax(),
    })
}

/// Selection Jacobian of (x, y, s) with respect to the flattened (A, b, c):
/// J_phi(z) * (-U^-1 V) at a residual zero z. The gate on rcond(U) is where
/// degenerate problems (nonunique solutions) fail.
pub fn sol_jacobian_selection(
    problem: &ConicProblem,
    z: &Vector,
    policy: &SelectionPolicy,
    rcond_tol: f64,
) -> Result<Matrix> {
    let res = residual_map(problem, z)?;
    if res.amax() > 1e-7 {
        return Err(Error::InvalidConfig(format!(
            "z is not a residual zero (|N|_inf = {:.3e})",
            res.amax()
        )));
    }
    let (u_block, v_block) = residual_jacobian_selection(problem, z, policy)?;
    let rcond = linalg::rcond_estimate(&u_block);
    if rcond < rcond_tol {
        return Err(Error::InvertibilityFailure { rcond, tol: rcond_tol });
    }
    let j_nu = -linalg::lu_solve_with_tol(&u_block, &v_block, 0.0)?;
    Ok(phi_jacobian(problem, z, policy)? * j_nu)
}

/// Force-mode variant of [`sol_jacobian_selection`]: the gated solve is
/// replaced with a pseudo-inverse truncated at `rcond_tol`, for crossing
/// degenerate instances deliberately.
pub fn sol_jacobian_selection_forced(
    problem: &ConicProblem,
    z: &Vector,
    policy: &SelectionPolicy,
    rcond_tol: f64,
) -> Result<Matrix> {
    let res = residual_map(problem, z)?;
    if res.amax() > 1e-7 {
        return Err(Error::InvalidConfig(format!(
            "z is not a residual zero (|N|_inf = {:.3e})",
            res.amax()
        )));
    }
    let (u_block, v_block) = residual_jacobian_selection(problem, z, policy)?;
    let j_nu = -linalg::pseudo_inverse(&u_block, rcond_tol) * v_block;
    Ok(phi_jacobian(problem, z, policy)? * j_nu)
}

/// J_phi = [[I, 0], [0, J_P], [0, J_P - I]] with J_P the dual-cone
/// projection selection at the v part of z.
fn phi_jacobian(problem: &ConicProblem, z: &Vector, policy: &SelectionPolicy) -> Result<Matrix> {
    let (m, n) = (problem.num_constraints(), problem.num_variables());
    let (_, v) = problem.split(z)?;
    let jp = problem.cone.dual().projection_jacobian_selection(&v, policy)?;
    let mut j_phi = Matrix::zeros(n + 2 * m, n + m);
    j_phi.view_mut((0, 0), (n, n)).copy_from(&Matrix::identity(n, n));
    j_phi.view_mut((n, n), (m, m)).copy_from(&jp);
    j_phi
        .view_mut((n + m, n), (m, m))
        .copy_from(&(&jp - Matrix::identity(m, m)));
    Ok(j_phi)
}

/// KKT satisfaction report for phi(z).
#[derive(Debug, Clone)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub s_in_cone: bool,
    pub y_in_dual_cone: bool,
    pub complementarity: f64,
}

pub fn kkt_check(problem: &ConicProblem, z: &Vector, tol: f64) -> Result<KktReport> {
    let sol = phi(problem, z)?;
    let stationarity = (problem.a.transpose() * &sol.y + &problem.c).amax();
    let primal_feasibility = (&problem.a * &sol.x + &sol.s - &problem.b).amax();
    Ok(KktReport {
        stationarity,
        primal_feasibility,
        s_in_cone: problem.cone.contains(&sol.s, tol)?,
        y_in_dual_cone: problem.cone.dual().contains(&sol.y, tol)?,
        complementarity: sol.s.dot(&sol.y).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Box [0,3] x [0,5] as A = [I; -I], b = (3, 5, 0, 0), orthant cone.
    fn box_lp(c: [f64; 2]) -> ConicProblem {
        let a = Matrix::from_row_slice(
            4,
            2,
            &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
        );
        let b = Vector::from_vec(vec![3.0, 5.0, 0.0, 0.0]);
        ConicProblem::new(a, b, Vector::from_vec(vec![c[0], c[1]]), Cone::nonneg(4)).unwrap()
    }

    #[test]
    fn degenerate_objective_has_a_zero_family() {
        // with c = 0 every x in the box is optimal; z = (x, Ax - b) is a zero
        let p = box_lp([0.0, 0.0]);
        for x in [[0.0, 0.0], [1.0, 2.0], [3.0, 5.0], [0.5, 4.9]] {
            let xv = Vector::from_vec(vec![x[0], x[1]]);
            let v = &p.a * &xv - &p.b;
            let mut z = Vector::zeros(6);
            z.rows_mut(0, 2).copy_from(&xv);
            z.rows_mut(2, 4).copy_from(&v);
            assert!(residual_map(&p, &z).unwrap().amax() < 1e-12);
        }
    }

    #[test]
    fn random_z_is_not_a_zero() {
        let p = box_lp([1.0, 1.0]);
        let z = Vector::from_vec(vec![0.3, -0.2, 1.0, 0.5, -0.7, 2.0]);
        assert!(residual_map(&p, &z).unwrap().amax() > 1e-3);
    }

    #[test]
    fn solver_finds_maximizing_vertex() {
        // c = (-1, -1) maximizes x1 + x2 over the box: x = (3, 5)
        let p = box_lp([-1.0, -1.0]);
        let z = solve_residual(&p, &Vector::zeros(6), &FixedPointConfig::default()).unwrap();
        assert!(residual_map(&p, &z).unwrap().amax() <= 1e-8);
        let sol = phi(&p, &z).unwrap();
        assert_relative_eq!(sol.x[0], 3.0, epsilon = 1e-7);
        assert_relative_eq!(sol.x[1], 5.0, epsilon = 1e-7);
    }

    #[test]
    fn solver_finds_minimizing_vertex() {
        let p = box_lp([1.0, 1.0]);
        let z = solve_residual(&p, &Vector::zeros(6), &FixedPointConfig::default()).unwrap();
        let sol = phi(&p, &z).unwrap();
        assert!(sol.x.amax() < 1e-7);
    }

    #[test]
    fn solved_points_satisfy_kkt() {
        for c in [[-1.0, -1.0], [1.0, 1.0], [-1.0, 2.0], [0.3, -0.7]] {
            let p = box_lp(c);
            let z =
                solve_residual(&p, &Vector::zeros(6), &FixedPointConfig::default()).unwrap();
            let report = kkt_check(&p, &z, 1e-8).unwrap();
            assert!(report.stationarity < 1e-7, "{report:?}");
            assert!(report.primal_feasibility < 1e-7, "{report:?}");
            assert!(report.s_in_cone && report.y_in_dual_cone, "{report:?}");
            assert!(report.complementarity < 1e-7, "{report:?}");
        }
    }

    #[test]
    fn phi_splits_via_moreau() {
        let p = box_lp([1.0, 1.0]);
        // v in K*: y = v, s = 0
        let mut z = Vector::zeros(6);
        z.rows_mut(2, 4).copy_from(&Vector::from_vec(vec![1.0, 2.0, 0.5, 3.0]));
        let sol = phi(&p, &z).unwrap();
        assert_eq!(sol.y, Vector::from_vec(vec![1.0, 2.0, 0.5, 3.0]));
        assert_eq!(sol.s, Vector::zeros(4));
        // v <= 0 (in the polar cone): y = 0, s = -v
        z.rows_mut(2, 4)
            .copy_from(&Vector::from_vec(vec![-1.0, -2.0, -0.5, -3.0]));
        let sol = phi(&p, &z).unwrap();
        assert_eq!(sol.y, Vector::zeros(4));
        assert_eq!(sol.s, Vector::from_vec(vec![1.0, 2.0, 0.5, 3.0]));
    }

    /// Finite-difference oracle: re-solve at perturbed parameters and
    /// difference the primal solution.
    fn fd_dx(
        p: &ConicProblem,
        z: &Vector,
        param: usize,
        h: f64,
    ) -> Vector {
        let (m, n) = (p.num_constraints(), p.num_variables());
        let perturbed = |delta: f64| -> Vector {
            let mut q = p.clone();
            if param < m * n {
                let (j, i) = (param / m, param % m);
                q.a[(i, j)] += delta;
            } else if param < m * n + m {
                q.b[param - m * n] += delta;
            } else {
                q.c[param - m * n - m] += delta;
            }
            let z1 = solve_residual(&q, z, &FixedPointConfig::default()).unwrap();
            phi(&q, &z1).unwrap().x
        };
        (perturbed(h) - perturbed(-h)) / (2.0 * h)
    }

    #[test]
    fn sol_jacobian_matches_finite_differences_at_nondegenerate_vertex() {
        let p = box_lp([-1.0, -1.0]);
        let z = solve_residual(&p, &Vector::zeros(6), &FixedPointConfig::default()).unwrap();
        let j = sol_jacobian_selection(&p, &z, &SelectionPolicy::default(), 1e-10).unwrap();
        let (m, n) = (4, 2);
        assert_eq!(j.nrows(), n + 2 * m);
        assert_eq!(j.ncols(), m * n + m + n);
        // x tracks the active constraints b1, b2: dx1/db1 = 1, dx2/db2 = 1
        assert_relative_eq!(j[(0, m * n)], 1.0, epsilon = 1e-6);
        assert_relative_eq!(j[(1, m * n + 1)], 1.0, epsilon = 1e-6);
        assert!(j[(0, m * n + 2)].abs() < 1e-8);
        // vertex solution with strict complementarity: dx/dc = 0
        for jc in 0..n {
            for r in 0..n {
                assert!(j[(r, m * n + m + jc)].abs() < 1e-8);
            }
        }
        // FD across all parameters for the primal rows
        for param in 0..p.parameter_dim() {
            let fd = fd_dx(&p, &z, param, 1e-5);
            for r in 0..n {
                assert_relative_eq!(j[(r, param)], fd[r], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn degenerate_problem_fails_the_gate() {
        let p = box_lp([0.0, 0.0]);
        // pick an interior optimal x: v = Ax - b is strictly negative on the
        // b-rows and strictly positive nowhere, so the projection Jacobian
        // zeroes out rows and U becomes singular
        let xv = Vector::from_vec(vec![1.0, 2.0]);
        let mut z = Vector::zeros(6);
        z.rows_mut(0, 2).copy_from(&xv);
        z.rows_mut(2, 4).copy_from(&(&p.a * &xv - &p.b));
        assert!(residual_map(&p, &z).unwrap().amax() < 1e-12);
        match sol_jacobian_selection(&p, &z, &SelectionPolicy::default(), 1e-10) {
            Err(Error::InvertibilityFailure { rcond, tol }) => assert!(rcond < tol),
            other => panic!("expected gate failure, got {other:?}"),
        }
    }

    #[test]
    fn soc_problem_solves_and_checks_kkt() {
        // min x s.t. (1, x) in SOC(2) shifted: Ax + s = b with
        // A = [[0], [-1]], b = (1, 0): s = (1, x), require s in SOC(2)
        let a = Matrix::from_row_slice(2, 1, &[0.0, -1.0]);
        let b = Vector::from_vec(vec![1.0, 0.0]);
        let c = Vector::from_vec(vec![1.0]);
        let p = ConicProblem::new(a, b, c, Cone::second_order(2).unwrap()).unwrap();
        let z = solve_residual(&p, &Vector::zeros(3), &FixedPointConfig::default()).unwrap();
        let sol = phi(&p, &z).unwrap();
        // minimizing x with |x| <= 1 gives x = -1
        assert_relative_eq!(sol.x[0], -1.0, epsilon = 1e-6);
        let report = kkt_check(&p, &z, 1e-7).unwrap();
        assert!(report.stationarity < 1e-6);
        assert!(report.primal_feasibility < 1e-6);
    }

    #[test]
    fn jacobian_u_block_matches_residual_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = box_lp([-1.0, 2.0]);
        let policy = SelectionPolicy::default();
        for _ in 0..20 {
            let z = Vector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
            // avoid projection kinks
            if z.rows(2, 4).iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            let (u_block, _) = residual_jacobian_selection(&p, &z, &policy).unwrap();
            let h = 1e-6;
            for col in 0..6 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[col] += h;
                zm[col] -= h;
                let fd = (residual_map(&p, &zp).unwrap() - residual_map(&p, &zm).unwrap())
                    / (2.0 * h);
                for row in 0..6 {
                    assert_relative_eq!(u_block[(row, col)], fd[row], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn jacobian_parameter_block_matches_residual_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = box_lp([-1.0, 2.0]);
        let policy = SelectionPolicy::default();
        let z = Vector::from_fn(6, |_, _| rng.gen_range(1.0..2.0));
        let (_, v_block) = residual_jacobian_selection(&p, &z, &policy).unwrap();
        let h = 1e-6;
        let (m, n) = (4, 2);
        for param in 0..p.parameter_dim() {
            let perturb = |delta: f64| -> Vector {
                let mut q = p.clone();
                if param < m * n {
                    let (j, i) = (param / m, param % m);
                    q.a[(i, j)] += delta;
                } else if param < m * n + m {
                    q.b[param - m * n] += delta;
                } else {
                    q.c[param - m * n - m] += delta;
                }
                residual_map(&q, &z).unwrap()
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            for row in 0..6 {
                assert_relative_eq!(v_block[(row, param)], fd[row], epsilon = 1e-6);
            }
        }
    }
}
