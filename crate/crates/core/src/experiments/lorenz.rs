//! Lorenz-like attractor from implicit differentiation of a degenerate
//! quartic inner problem.
//!
//! The bilevel objective is max u^T z with z the minimizer of
//! |s - F(u)|^4, F being the Lorenz vector field. Analytically z = F(u) and
//! u^T F(u) = (1/2) u^T H u is a nondegenerate quadratic with a strict
//! saddle at the origin, so exact gradient ascent diverges along the
//! unstable eigendirection. The quartic's curvature vanishes at the
//! solution, so differentiating the inner stationarity condition at a point
//! solved only to tolerance works with a curvature block of order tol^2:
//! pure numerical noise. The documented regularization truncates singular
//! values of that block below the inner tolerance before the pseudo-inverse,
//! which zeroes the implicit term; the ascent then reduces to Euler steps on
//! the vector field itself and traces the attractor instead of diverging.

use crate::error::{Error, Result};
use crate::implicit::ImplicitProblem;
use crate::linalg::{self, Matrix, Vector};
use crate::tape::Tape;

use super::ExperimentConfig;

/// Tolerance to which the inner quartic problem is solved; also the
/// absolute singular-value floor of the regularized differentiation.
pub const INNER_TOL: f64 = 1e-4;
/// Recording stops once an iterate norm passes this bound.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Coefficients of the Lorenz vector field.
#[derive(Debug, Clone, Copy)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        LorenzParams { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }
}

/// F(u) = (sigma (y - x), x (rho - z) - y, x y - beta z).
pub fn lorenz_field(p: &LorenzParams, u: &Vector) -> Vector {
    let (x, y, z) = (u[0], u[1], u[2]);
    Vector::from_vec(vec![
        p.sigma * (y - x),
        x * (p.rho - z) - y,
        x * y - p.beta * z,
    ])
}

/// The symmetric matrix with u^T F(u) = (1/2) u^T H u.
pub fn lorenz_h(p: &LorenzParams) -> Matrix {
    Matrix::from_row_slice(
        3,
        3,
        &[
            -2.0 * p.sigma,
            p.sigma + p.rho,
            0.0,
            p.sigma + p.rho,
            -2.0,
            0.0,
            0.0,
            0.0,
            -2.0 * p.beta,
        ],
    )
}

/// |u^T F(u) - (1/2) u^T H u|, zero up to roundoff for every u.
pub fn quadratic_identity_residual(p: &LorenzParams, u: &Vector) -> f64 {
    let lhs = u.dot(&lorenz_field(p, u));
    let rhs = 0.5 * u.dot(&(lorenz_h(p) * u));
    (lhs - rhs).abs()
}

/// Stationarity residual of the inner quartic, G(u, s) = 4 |s - F(u)|^2
/// (s - F(u)), as a tape on the stacked input (u, s).
pub fn inner_residual_tape(p: &LorenzParams) -> Result<Tape> {
    let mut t = Tape::new(6);
    let u = t.input(0, 3)?;
    let s = t.input(3, 3)?;
    let x = t.slice(u, 0, 1)?;
    let y = t.slice(u, 1, 1)?;
    let z = t.slice(u, 2, 1)?;
    let yx = t.sub(y, x)?;
    let f1 = t.scale(yx, p.sigma)?;
    let rx = t.scale(x, p.rho)?;
    let xz = t.mul(x, z)?;
    let f2a = t.sub(rx, xz)?;
    let f2 = t.sub(f2a, y)?;
    let xy = t.mul(x, y)?;
    let bz = t.scale(z, p.beta)?;
    let f3 = t.sub(xy, bz)?;
    let f = t.concat(vec![f1, f2, f3])?;
    let d = t.sub(s, f)?;
    let nq = t.squared_norm(d)?;
    let nq3 = t.concat(vec![nq, nq, nq])?;
    let scaled = t.mul(nq3, d)?;
    let g = t.scale(scaled, 4.0)?;
    t.set_outputs(&[g])?;
    Ok(t)
}

/// Solves the inner quartic to `tol` in the iterate by Newton steps on its
/// gradient (each step contracts s - F(u) by 2/3), warm-started at `warm`.
pub fn solve_inner(p: &LorenzParams, u: &Vector, warm: &Vector, tol: f64) -> Result<Vector> {
    let f = lorenz_field(p, u);
    let mut s = warm.clone();
    for _ in 0..10_000 {
        let d = &s - &f;
        if d.amax() <= tol {
            return Ok(s);
        }
        s -= d / 3.0;
    }
    Err(Error::NoConvergence { iterations: 10_000, residual: (&s - &f).amax() })
}

/// Implicit-ascent gradient of u^T z at the inexactly solved inner point:
/// z + J^T u with J = -B^+ A, where singular values of the curvature block
/// B below the inner tolerance are truncated to zero. At the degenerate
/// solution the whole block sits below that floor, so J = 0 and the
/// gradient collapses to z itself.
pub fn implicit_ascent_gradient(
    problem: &ImplicitProblem,
    u: &Vector,
    s: &Vector,
    tol: f64,
) -> Result<Vector> {
    let (a, b) = problem.residual_jacobian_split(u, s)?;
    let smax = linalg::spectral_norm(&b);
    let j = if smax <= tol {
        Matrix::zeros(3, 3)
    } else {
        -linalg::pseudo_inverse(&b, tol / smax) * a
    };
    Ok(s + j.transpose() * u)
}

#[derive(Debug, Clone)]
pub struct LorenzRun {
    pub params: LorenzParams,
    pub h: Matrix,
    /// Force-mode implicit ascent through the quartic layer.
    pub implicit: Vec<[f64; 4]>,
    /// Plain ascent on the equivalent quadratic (diverges off the saddle).
    pub plain: Vec<[f64; 4]>,
    /// RK4 integration of the Lorenz ODE for visual comparison.
    pub reference: Vec<[f64; 4]>,
    pub plain_diverged: bool,
    pub implicit_max_norm: f64,
}

fn record(k: usize, u: &Vector) -> [f64; 4] {
    [k as f64, u[0], u[1], u[2]]
}

/// Defaults tailored to this experiment: the classical chaotic initial
/// point and an Euler-stable step size.
pub fn default_lorenz_config() -> ExperimentConfig {
    ExperimentConfig {
        init: vec![0.0, 1.0, 1.05],
        step: 0.01,
        iterations: 10_000,
        ..Default::default()
    }
}

/// Runs the implicit ascent, the plain quadratic ascent, and the reference
/// ODE integration from the same initial point.
pub fn run_lorenz(cfg: &ExperimentConfig) -> Result<LorenzRun> {
    cfg.validate()?;
    if cfg.init.len() != 3 {
        return Err(Error::InvalidConfig("lorenz needs a 3-dimensional initial point".into()));
    }
    let p = LorenzParams::default();
    let h = lorenz_h(&p);
    let u0 = Vector::from_vec(cfg.init.clone());

    // (i) implicit ascent, always in force mode: the run exists to cross
    // the degenerate selection deliberately
    let problem = ImplicitProblem::new(inner_residual_tape(&p)?, 3, 3)?.forced();
    let mut u = u0.clone();
    let mut s = lorenz_field(&p, &u);
    let mut implicit = Vec::with_capacity(cfg.iterations + 1);
    let mut implicit_max_norm: f64 = u.norm();
    implicit.push(record(0, &u));
    for k in 1..=cfg.iterations {
        s = solve_inner(&p, &u, &s, INNER_TOL)?;
        let g = implicit_ascent_gradient(&problem, &u, &s, INNER_TOL)?;
        u += g * cfg.step;
        implicit_max_norm = implicit_max_norm.max(u.norm());
        implicit.push(record(k, &u));
        if !u.iter().all(|v| v.is_finite()) || u.norm() > DIVERGENCE_BOUND {
            break;
        }
    }

    // (ii) plain ascent on (1/2) u^T H u
    let mut u = u0.clone();
    let mut plain = Vec::with_capacity(cfg.iterations + 1);
    let mut plain_diverged = false;
    plain.push(record(0, &u));
    for k in 1..=cfg.iterations {
        u += &h * &u * cfg.step;
        plain.push(record(k, &u));
        if !u.iter().all(|v| v.is_finite()) || u.norm() > DIVERGENCE_BOUND {
            plain_diverged = true;
            break;
        }
    }

    // reference ODE path, classical RK4
    let mut u = u0;
    let mut reference = Vec::with_capacity(cfg.iterations + 1);
    reference.push(record(0, &u));
    let dt = cfg.step;
    for k in 1..=cfg.iterations {
        let k1 = lorenz_field(&p, &u);
        let k2 = lorenz_field(&p, &(&u + &k1 * (dt / 2.0)));
        let k3 = lorenz_field(&p, &(&u + &k2 * (dt / 2.0)));
        let k4 = lorenz_field(&p, &(&u + &k3 * dt));
        u += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        reference.push(record(k, &u));
    }

    Ok(LorenzRun {
        params: p,
        h,
        implicit,
        plain,
        reference,
        plain_diverged,
        implicit_max_norm,
    })
}
