//! Applied pipelines: equilibrium-layer training, Lasso penalty tuning,
//! and conic solution-map differentiation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conic::{
    kkt_check, phi, sol_jacobian_selection, sol_jacobian_selection_forced, solve_residual, Cone,
    ConicProblem, KktReport, PrimalDualSolution,
};
use crate::deq::{deq_forward_from, deq_conservative_gradient, random_contractive_layer, tanh_activation, MonotoneLayer};
use crate::error::{Error, Result};
use crate::implicit::FixedPointConfig;
use crate::lasso::{
    lasso_jacobian_selection, solve_lasso, tune_lambda, LassoProblem, QSelection, TuneConfig,
    TuneRecord,
};
use crate::linalg::{Matrix, Vector};
use crate::sgd::{sgd_run, stationarity_measure, LossTerm, SGDConfig, SumProblem, Trajectory};
use crate::tape::{SelectionPolicy, Tape};

/// One training sample of the equilibrium-layer toy: the trained weights
/// are the layer bias, the loss is the squared distance of the equilibrium
/// to a fixed target.
#[derive(Debug, Clone)]
pub struct DeqTrainTerm {
    /// Template layer; its bias is replaced by the trained weights. The
    /// monotonicity certificate only involves W, so swapping b is safe.
    layer: MonotoneLayer,
    target: Vector,
}

impl DeqTrainTerm {
    pub fn new(layer: MonotoneLayer, target: Vector) -> Result<Self> {
        if target.len() != layer.dim() {
            return Err(Error::ShapeMismatch(format!(
                "target has length {} but the layer dimension is {}",
                target.len(),
                layer.dim()
            )));
        }
        Ok(DeqTrainTerm { layer, target })
    }

    fn equilibrium(&self, w: &Vector) -> Result<(MonotoneLayer, Vector)> {
        let mut layer = self.layer.clone();
        layer.b = w.clone();
        let z = deq_forward_from(&layer, &Vector::zeros(layer.dim()), &FixedPointConfig::default())?.z;
        Ok((layer, z))
    }
}

impl LossTerm for DeqTrainTerm {
    fn value(&self, w: &Vector) -> Result<f64> {
        let (_, z) = self.equilibrium(w)?;
        Ok((z - &self.target).norm_squared())
    }

    fn gradient_selection(&self, w: &Vector, policy: &SelectionPolicy) -> Result<Vector> {
        let (layer, z) = self.equilibrium(w)?;
        let v = (&z - &self.target) * 2.0;
        let (_, g_b) = deq_conservative_gradient(&layer, &z, &v, policy, 1e-12)?;
        Ok(g_b)
    }
}

/// Equilibrium-layer toy problem: one contractive W, several random
/// targets, trained over the shared bias.
pub fn deq_toy_problem(m: usize, num_terms: usize, seed: u64) -> Result<SumProblem> {
    let layer = random_contractive_layer(m, 0.8, tanh_activation(m), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // targets scatter around a shared center so the per-sample gradient
    // noise stays small enough for the decaying steps to average out
    let center = Vector::from_fn(m, |_, _| rng.gen_range(-0.5..0.5));
    let mut terms: Vec<Box<dyn LossTerm>> = Vec::with_capacity(num_terms);
    for _ in 0..num_terms {
        let target = &center + Vector::from_fn(m, |_, _| rng.gen_range(-0.1..0.1));
        terms.push(Box::new(DeqTrainTerm::new(layer.clone(), target)?));
    }
    SumProblem::new(terms, m)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trajectory: Trajectory,
    /// Full objective (mean over terms) at each recorded iterate.
    pub mean_losses: Vec<f64>,
    pub final_stationarity: f64,
}

/// Stochastic subgradient training of the equilibrium-layer toy.
pub fn run_deq_train(m: usize, num_terms: usize, cfg: &SGDConfig, seed: u64) -> Result<TrainReport> {
    let problem = deq_toy_problem(m, num_terms, seed)?;
    let trajectory = sgd_run(&problem, &Vector::zeros(m), cfg)?;
    let mean_losses = trajectory
        .records
        .iter()
        .map(|r| problem.mean_value(&r.w))
        .collect::<Result<Vec<f64>>>()?;
    let final_stationarity = stationarity_measure(&problem, &trajectory.final_w, 4)?;
    Ok(TrainReport { trajectory, mean_losses, final_stationarity })
}

/// Held-out Lasso criterion as a single loss term over the log-penalty, so
/// penalty tuning can run through the stochastic trainer and the
/// stationarity diagnostic.
#[derive(Debug, Clone)]
pub struct LassoTuneTerm {
    pub problem: LassoProblem,
    pub criterion: Tape,
    pub q: QSelection,
    pub inner_tol: f64,
    pub inner_max_iterations: usize,
    pub rcond_tol: f64,
}

impl LossTerm for LassoTuneTerm {
    fn value(&self, w: &Vector) -> Result<f64> {
        let sol = solve_lasso(&self.problem, w[0], self.inner_tol, self.inner_max_iterations)?;
        Ok(self.criterion.eval(&sol.beta_hat)?[0])
    }

    fn gradient_selection(&self, w: &Vector, policy: &SelectionPolicy) -> Result<Vector> {
        let sol = solve_lasso(&self.problem, w[0], self.inner_tol, self.inner_max_iterations)?;
        let dbeta = lasso_jacobian_selection(&self.problem, &sol, &self.q, self.rcond_tol)?;
        let grad_c = self.criterion.jacobian_selection(&sol.beta_hat, policy)?.matrix;
        Ok(Vector::from_element(1, (grad_c * dbeta)[(0, 0)]))
    }
}

/// Synthetic train/test split with a sparse ground truth: few noisy
/// training samples relative to the dimension, so shrinkage helps and the
/// held-out curve has an interior minimum. Returns the training problem and
/// the held-out criterion 1/2 |y_test - X_test beta|^2 as a tape.
pub fn held_out_lasso(seed: u64) -> Result<(LassoProblem, Tape)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_dim = 6;
    let beta_true = Vector::from_vec(vec![1.5, 0.0, -2.0, 0.0, 0.0, 0.8]);
    let mut sample = |n: usize| -> (Matrix, Vector) {
        let x = Matrix::from_fn(n, p_dim, |_, _| rng.gen_range(-1.0..1.0));
        let noise = Vector::from_fn(n, |_, _| rng.gen_range(-0.6..0.6));
        let y = &x * &beta_true + noise;
        (x, y)
    };
    let (x_train, y_train) = sample(10);
    let (x_test, y_test) = sample(40);
    let problem = LassoProblem::new(x_train, y_train)?;

    let mut t = Tape::new(p_dim);
    let b = t.full_input()?;
    let pred = t.affine(b, &x_test, &Vector::zeros(x_test.nrows()))?;
    let ytest = t.constant(y_test.iter().cloned().collect())?;
    let diff = t.sub(ytest, pred)?;
    let sq = t.squared_norm(diff)?;
    let half = t.scale(sq, 0.5)?;
    t.set_outputs(&[half])?;
    Ok((problem, t))
}

/// Hypergradient descent on the held-out criterion.
pub fn run_lasso_tune(seed: u64, lambda0: f64, cfg: &TuneConfig) -> Result<Vec<TuneRecord>> {
    let (problem, criterion) = held_out_lasso(seed)?;
    tune_lambda(&problem, &criterion, lambda0, &QSelection::Lars, cfg)
}

/// Outcome of solving and differentiating a conic program.
#[derive(Debug, Clone)]
pub struct ConicDiffReport {
    pub z: Vector,
    pub solution: PrimalDualSolution,
    pub kkt: KktReport,
    /// d(x, y, s)/d(A, b, c) selection; absent when the gate rejected the
    /// instance and force mode was off.
    pub jacobian: Option<Matrix>,
    pub gate_error: Option<String>,
}

/// The box [0, 3] x [0, 5] as a cone program: A = [I; -I], b = (3, 5, 0, 0),
/// orthant slacks, cost `c` to minimize.
pub fn box_lp_problem(c: &[f64]) -> Result<ConicProblem> {
    if c.len() != 2 {
        return Err(Error::InvalidConfig("box LP cost must have length 2".into()));
    }
    let a = Matrix::from_row_slice(
        4,
        2,
        &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
    );
    let b = Vector::from_vec(vec![3.0, 5.0, 0.0, 0.0]);
    ConicProblem::new(a, b, Vector::from_vec(vec![c[0], c[1]]), Cone::nonneg(4))
}

/// Solves the box LP with cost `c` and differentiates its solution map.
/// Degenerate costs (nonunique solutions) trip the invertibility gate;
/// `force` substitutes a truncated pseudo-inverse instead of failing.
pub fn run_conic_diff(c: &[f64], force: bool) -> Result<ConicDiffReport> {
    let problem = box_lp_problem(c)?;
    let z = solve_residual(&problem, &Vector::zeros(problem.residual_dim()), &FixedPointConfig::default())?;
    let solution = phi(&problem, &z)?;
    let kkt = kkt_check(&problem, &z, 1e-8)?;
    let policy = SelectionPolicy::default();
    let (jacobian, gate_error) = match sol_jacobian_selection(&problem, &z, &policy, 1e-12) {
        Ok(j) => (Some(j), None),
        Err(e @ Error::InvertibilityFailure { .. }) => {
            if force {
                (Some(sol_jacobian_selection_forced(&problem, &z, &policy, 1e-12)?), Some(e.to_string()))
            } else {
                (None, Some(e.to_string()))
            }
        }
        Err(e) => return Err(e),
    };
    Ok(ConicDiffReport { z, solution, kkt, jacobian, gate_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lasso::Schedule;

    #[test]
    fn deq_training_converges_and_is_stationary() {
        let cfg = SGDConfig {
            alpha0: 0.2,
            gamma: 0.6,
            max_steps: 10_000,
            record_stride: 20,
            seed: 11,
            ..Default::default()
        };
        let report = run_deq_train(4, 5, &cfg, 5).unwrap();
        assert!(
            report.final_stationarity <= 1e-2,
            "stationarity {:.3e}",
            report.final_stationarity
        );
        let losses = &report.mean_losses;
        let tail = &losses[losses.len() - losses.len() / 10..];
        let spread = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - tail.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread <= 1e-3, "last-decile loss oscillation {spread:.3e}");
    }

    #[test]
    fn lasso_tune_term_matches_the_deterministic_tuner() {
        let (problem, criterion) = held_out_lasso(4242).unwrap();
        let term = LassoTuneTerm {
            problem,
            criterion,
            q: QSelection::Lars,
            inner_tol: 1e-10,
            inner_max_iterations: 400_000,
            rcond_tol: 1e-12,
        };
        let cfg = TuneConfig {
            schedule: Schedule::Constant { alpha: 0.0 },
            max_steps: 1,
            inner_tol: 1e-10,
            ..TuneConfig::default()
        };
        let records = run_lasso_tune(4242, 0.3, &cfg).unwrap();
        let w = Vector::from_element(1, 0.3);
        let v = term.value(&w).unwrap();
        let g = term
            .gradient_selection(&w, &SelectionPolicy::default())
            .unwrap();
        assert_eq!(v, records[0].criterion);
        assert_eq!(g[0], records[0].hypergradient);
    }

    #[test]
    fn conic_diff_differentiates_a_vertex_solution() {
        let rep = run_conic_diff(&[-1.0, -1.0], false).unwrap();
        assert!(rep.gate_error.is_none());
        let j = rep.jacobian.unwrap();
        assert_eq!(j.nrows(), 2 + 2 * 4);
        assert_eq!(j.ncols(), 4 * 2 + 4 + 2);
        assert_eq!(rep.solution.x, Vector::from_vec(vec![3.0, 5.0]));
        assert!(rep.kkt.stationarity <= 1e-8 && rep.kkt.primal_feasibility <= 1e-8);
    }

    #[test]
    fn degenerate_cost_trips_the_gate_and_force_crosses_it() {
        let rep = run_conic_diff(&[0.0, 0.0], false).unwrap();
        assert!(rep.gate_error.is_some());
        assert!(rep.jacobian.is_none());
        let rep = run_conic_diff(&[0.0, 0.0], true).unwrap();
        assert!(rep.gate_error.is_some());
        assert!(rep.jacobian.is_some());
    }
}
