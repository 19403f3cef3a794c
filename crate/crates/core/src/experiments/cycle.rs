//! Planar limit-cycle dynamics through a box-constrained inner problem.
//!
//! The outer loss is a quadratic in (x, y) and the inner solution s solves
//! argmax (s1 + s2) g(x, y) over a box, written as the projected-gradient
//! fixed point s = P(s + g 1) with the projection expressed as a difference
//! of relu terms. Differentiating that fixed point and descending on (x, y)
//! produces a recurrent, non-stationary trajectory: away from the switching
//! line g = 0 the inner selection Jacobian vanishes, so the descent follows
//! whichever branch quadratic is active and keeps crossing the line.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::implicit::{
    implicit_jacobian_selection_full, solve_fixed_point_fn, FixedPointConfig, ImplicitProblem,
};
use crate::linalg::{self, Matrix, Vector};
use crate::sgd::LossTerm;
use crate::tape::{SelectionPolicy, Tape};

use super::ExperimentConfig;

/// Two post-burn-in iterates this close count as a return.
pub const RETURN_RADIUS: f64 = 1e-2;
/// Minimum index gap between the two iterates of a return pair.
pub const RETURN_MIN_GAP: usize = 10;
/// Per-step displacement below this disqualifies the run as recurrent
/// (it would be plain convergence, not a cycle).
pub const MIN_STEP_DISPLACEMENT: f64 = 1e-3;
/// Iterate-norm bound past which a run is truncated and reported as diverged.
const DIVERGENCE_BOUND: f64 = 1e8;

/// Outer quadratic plus inner box linear program, with the inner problem in
/// fixed-point form and its residual on a tape for implicit differentiation.
///
/// Outer loss: c1 (x - s1)^2 + c2 (y - s2)^2.
/// Inner objective gradient: g(x, y) = -slope x + y + offset.
/// Box: [0, hi1] x [0, hi2].
#[derive(Debug, Clone)]
pub struct CycleKernel {
    c1: f64,
    c2: f64,
    slope: f64,
    offset: f64,
    hi: [f64; 2],
    problem: ImplicitProblem,
}

impl CycleKernel {
    /// The reference instance: loss (x - s1)^2 + 4 (y - s2)^2, switching
    /// line -3x + y + 2 = 0, box [0, 3] x [0, 5].
    pub fn base(force: bool) -> Self {
        Self::new(1.0, 4.0, 3.0, 2.0, [3.0, 5.0], force).expect("base kernel is valid")
    }

    /// Perturbed instance; coefficients at eps = 0 are the base instance
    /// scaled by 1/4, so a run with step size 4 h reproduces the base run
    /// with step h bitwise (all rescalings are powers of two).
    pub fn perturbed(eps: &[f64; 6], force: bool) -> Result<Self> {
        Self::new(
            0.25 + eps[0],
            1.0 + eps[1],
            3.0 + eps[2],
            2.0 + eps[3],
            [(3.0 - eps[4]).max(0.0), (5.0 - eps[5]).max(0.0)],
            force,
        )
    }

    pub fn new(
        c1: f64,
        c2: f64,
        slope: f64,
        offset: f64,
        hi: [f64; 2],
        force: bool,
    ) -> Result<Self> {
        if !(c1.is_finite() && c2.is_finite()) {
            return Err(Error::InvalidConfig("outer loss coefficients must be finite".into()));
        }
        if !(hi[0] >= 0.0 && hi[1] >= 0.0) {
            return Err(Error::InvalidConfig("box upper bounds must be nonnegative".into()));
        }
        // residual F((x, y), s) = s - P(s + g 1) on stacked input (x, y, s)
        let mut t = Tape::new(4);
        let xy = t.input(0, 2)?;
        let s = t.input(2, 2)?;
        let g = t.affine(xy, &Matrix::from_row_slice(1, 2, &[-slope, 1.0]), &Vector::from_vec(vec![offset]))?;
        let gg = t.concat(vec![g, g])?;
        let arg = t.add(s, gg)?;
        let lower = t.relu(arg)?;
        let shifted_in = t.constant(vec![hi[0], hi[1]])?;
        let shifted = t.sub(arg, shifted_in)?;
        let upper = t.relu(shifted)?;
        let proj = t.sub(lower, upper)?;
        let f = t.sub(s, proj)?;
        t.set_outputs(&[f])?;
        let mut problem = ImplicitProblem::new(t, 2, 2)?;
        if force {
            problem = problem.forced();
        }
        Ok(CycleKernel { c1, c2, slope, offset, hi, problem })
    }

    pub fn box_hi(&self) -> [f64; 2] {
        self.hi
    }

    /// Gradient of the inner objective, the quantity whose sign selects the
    /// active corner of the box.
    pub fn inner_gradient(&self, x: f64, y: f64) -> f64 {
        -self.slope * x + y + self.offset
    }

    /// Solves the inner fixed point s = P(s + g 1), warm-started at the
    /// closed-form corner candidate (any box point is fixed when g = 0, so
    /// the warm start is kept there after clamping into the box).
    pub fn solve_inner(&self, xy: &Vector, warm: &Vector) -> Result<Vector> {
        let g = self.inner_gradient(xy[0], xy[1]);
        let candidate = if g > 0.0 {
            Vector::from_vec(vec![self.hi[0], self.hi[1]])
        } else if g < 0.0 {
            Vector::zeros(2)
        } else {
            Vector::from_vec(vec![
                warm[0].clamp(0.0, self.hi[0]),
                warm[1].clamp(0.0, self.hi[1]),
            ])
        };
        let cfg = FixedPointConfig {
            max_iterations: 10_000,
            tolerance: 1e-10,
            damping: 1.0,
            anderson_depth: 0,
        };
        let sol = solve_fixed_point_fn(
            |s| Ok(s - self.problem.residual_value(xy, s)?),
            &candidate,
            &cfg,
        )?;
        Ok(sol.z)
    }

    pub fn loss(&self, xy: &Vector, s: &Vector) -> f64 {
        let dx = xy[0] - s[0];
        let dy = xy[1] - s[1];
        self.c1 * dx * dx + self.c2 * dy * dy
    }

    /// Backpropagation gradient at (x, y): the partial outer gradient plus
    /// the implicit selection term J_s^T grad_s. In force mode an exactly
    /// singular inner block falls back to a truncated pseudo-inverse, which
    /// is what crossing the switching line deliberately requires.
    pub fn gradient(&self, xy: &Vector, s: &Vector, policy: &SelectionPolicy) -> Result<Vector> {
        let problem = self.problem.clone().with_policy(policy.clone());
        let j_s = match implicit_jacobian_selection_full(&problem, xy, s) {
            Ok(sel) => sel.matrix,
            Err(Error::SingularMatrix { .. }) if problem.force_mode => {
                let (a, b) = problem.residual_jacobian_split(xy, s)?;
                -linalg::pseudo_inverse(&b, problem.rcond_tol) * a
            }
            Err(e) => return Err(e),
        };
        let dx = xy[0] - s[0];
        let dy = xy[1] - s[1];
        let d_xy = Vector::from_vec(vec![2.0 * self.c1 * dx, 2.0 * self.c2 * dy]);
        let d_s = Vector::from_vec(vec![-2.0 * self.c1 * dx, -2.0 * self.c2 * dy]);
        Ok(d_xy + j_s.transpose() * d_s)
    }
}

impl LossTerm for CycleKernel {
    fn value(&self, w: &Vector) -> Result<f64> {
        let warm = Vector::from_vec(vec![self.hi[0] / 2.0, self.hi[1] / 2.0]);
        let s = self.solve_inner(w, &warm)?;
        Ok(self.loss(w, &s))
    }

    fn gradient_selection(&self, w: &Vector, policy: &SelectionPolicy) -> Result<Vector> {
        let warm = Vector::from_vec(vec![self.hi[0] / 2.0, self.hi[1] / 2.0]);
        let s = self.solve_inner(w, &warm)?;
        self.gradient(w, &s, policy)
    }
}

/// One trajectory sample.
#[derive(Debug, Clone, Copy)]
pub struct CycleRecord {
    pub k: usize,
    pub x: f64,
    pub y: f64,
    pub s1: f64,
    pub s2: f64,
    pub loss: f64,
}

/// Return-to-a-neighborhood statistic over the post-burn-in tail.
#[derive(Debug, Clone)]
pub struct RecurrenceReport {
    /// A return pair exists and the per-step displacement never collapsed.
    pub recurrent: bool,
    pub burn_in: usize,
    pub min_return_distance: f64,
    pub return_pair: Option<(usize, usize)>,
    pub min_step_displacement: f64,
}

/// Scans post-burn-in iterates for a pair at least `min_gap` apart within
/// `radius` of each other, requiring every consecutive displacement to stay
/// at or above `min_displacement`.
pub fn recurrence_report(
    points: &[[f64; 2]],
    burn_in: usize,
    radius: f64,
    min_gap: usize,
    min_displacement: f64,
) -> RecurrenceReport {
    let tail = &points[burn_in.min(points.len())..];
    let mut min_step = f64::INFINITY;
    for w in tail.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        min_step = min_step.min(d);
    }
    let mut min_return = f64::INFINITY;
    let mut pair = None;
    for i in 0..tail.len() {
        for j in (i + min_gap)..tail.len() {
            let d = ((tail[j][0] - tail[i][0]).powi(2) + (tail[j][1] - tail[i][1]).powi(2)).sqrt();
            if d < min_return {
                min_return = d;
                pair = Some((burn_in + i, burn_in + j));
            }
        }
    }
    let returned = pair.is_some() && min_return <= radius;
    RecurrenceReport {
        recurrent: returned && min_step >= min_displacement,
        burn_in,
        min_return_distance: min_return,
        return_pair: pair,
        min_step_displacement: min_step,
    }
}

/// A finished cycle run.
#[derive(Debug, Clone)]
pub struct CycleRun {
    pub records: Vec<CycleRecord>,
    pub recurrence: RecurrenceReport,
    /// Recorded losses matched the active branch quadratic everywhere off
    /// the switching line.
    pub branch_consistent: bool,
    /// The iterate left the divergence bound and the run was cut short.
    pub truncated: bool,
}

/// Runs gradient descent on the outer variables of `kernel` from `init`.
pub fn run_with_kernel(
    kernel: &CycleKernel,
    init: [f64; 2],
    step: f64,
    iterations: usize,
) -> Result<CycleRun> {
    let policy = SelectionPolicy::default();
    let mut w = Vector::from_vec(vec![init[0], init[1]]);
    let mut s = Vector::from_vec(vec![kernel.hi[0] / 2.0, kernel.hi[1] / 2.0]);
    let mut records = Vec::with_capacity(iterations + 1);
    let mut branch_consistent = true;
    let mut truncated = false;
    for k in 0..=iterations {
        s = kernel.solve_inner(&w, &s)?;
        let loss = kernel.loss(&w, &s);
        records.push(CycleRecord { k, x: w[0], y: w[1], s1: s[0], s2: s[1], loss });
        let g = kernel.inner_gradient(w[0], w[1]);
        if g != 0.0 {
            let corner = if g > 0.0 { kernel.hi } else { [0.0, 0.0] };
            let expected = kernel.c1 * (w[0] - corner[0]).powi(2)
                + kernel.c2 * (w[1] - corner[1]).powi(2);
            if (loss - expected).abs() > 1e-9 * (1.0 + expected.abs()) {
                branch_consistent = false;
            }
        }
        if k == iterations {
            break;
        }
        let grad = kernel.gradient(&w, &s, &policy)?;
        w -= grad * step;
        if !w.iter().all(|v| v.is_finite()) || w.norm() > DIVERGENCE_BOUND {
            truncated = true;
            break;
        }
    }
    let points: Vec<[f64; 2]> = records.iter().map(|r| [r.x, r.y]).collect();
    let recurrence = recurrence_report(
        &points,
        iterations / 2,
        RETURN_RADIUS,
        RETURN_MIN_GAP,
        MIN_STEP_DISPLACEMENT,
    );
    Ok(CycleRun { records, recurrence, branch_consistent, truncated })
}

/// Reference cycle run with the base kernel.
pub fn run_cycle(cfg: &ExperimentConfig) -> Result<CycleRun> {
    cfg.validate()?;
    if cfg.init.len() != 2 {
        return Err(Error::InvalidConfig("cycle needs a 2-dimensional initial point".into()));
    }
    let kernel = CycleKernel::base(cfg.force_implicit);
    run_with_kernel(&kernel, [cfg.init[0], cfg.init[1]], cfg.step, cfg.iterations)
}

/// One perturbed realization.
#[derive(Debug, Clone)]
pub struct PerturbedDraw {
    pub eps: [f64; 6],
    pub run: CycleRun,
}

/// Runs `cfg.draws` independently perturbed instances concurrently. The
/// perturbed coefficients are the base ones scaled by 1/4, so the internal
/// step size is 4 x cfg.step; at sigma2 = 0 every draw reproduces the
/// unperturbed trajectory bitwise.
pub fn run_cycle_perturbed(cfg: &ExperimentConfig) -> Result<Vec<PerturbedDraw>> {
    cfg.validate()?;
    if cfg.init.len() != 2 {
        return Err(Error::InvalidConfig("cycle needs a 2-dimensional initial point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.sigma2.sqrt())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let draws: Vec<[f64; 6]> = (0..cfg.draws)
        .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
        .collect();
    let init = [cfg.init[0], cfg.init[1]];
    let step = 4.0 * cfg.step;
    let mut out = Vec::with_capacity(cfg.draws);
    std::thread::scope(|scope| {
        let handles: Vec<_> = draws
            .iter()
            .map(|eps| {
                scope.spawn(move || -> Result<PerturbedDraw> {
                    let kernel = CycleKernel::perturbed(eps, cfg.force_implicit)?;
                    let run = run_with_kernel(&kernel, init, step, cfg.iterations)?;
                    Ok(PerturbedDraw { eps: *eps, run })
                })
            })
            .collect();
        for h in handles {
            out.push(h.join().expect("perturbed draw thread panicked"));
        }
    });
    out.into_iter().collect()
}
