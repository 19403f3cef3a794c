//! Lasso hyperparameter differentiation: FISTA inner solver, the
//! equicorrelation set, the q-selection family of conservative derivatives
//! of the solution path with respect to the log-penalty, and outer gradient
//! tuning of the penalty.
//!
//! The penalty is parametrized as e^lambda throughout, so the outer descent
//! is unconstrained.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::tape::Tape;

/// Relative tolerance defining membership in the equicorrelation set.
pub const EQUICORRELATION_TOL: f64 = 1e-8;

/// min over beta of 1/2 |y - X beta|^2 + e^lambda |beta|_1.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub x: Matrix,
    pub y: Vector,
}

impl LassoProblem {
    pub fn new(x: Matrix, y: Vector) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "X has {} rows but y has length {}",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidConfig("empty design matrix".into()));
        }
        for j in 0..x.ncols() {
            if x.column(j).amax() == 0.0 {
                return Err(Error::InvalidConfig(format!("design column {j} is all zero")));
            }
        }
        linalg::ensure_finite(&x, "design matrix")?;
        linalg::ensure_finite_vec(&y, "observations")?;
        Ok(LassoProblem { x, y })
    }

    pub fn num_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.x.ncols()
    }

    /// Loads rows of `p` feature columns followed by one response column.
    /// A header row is skipped when its first field does not parse as a
    /// number.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_path(path)
            .map_err(Error::Csv)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(Error::Csv)?;
            let parsed: std::result::Result<Vec<f64>, _> =
                record.iter().map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(vals) => rows.push(vals),
                Err(_) if i == 0 => continue,
                Err(e) => {
                    return Err(Error::InvalidConfig(format!(
                        "csv row {i}: {e}"
                    )))
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidConfig("csv holds no data rows".into()));
        }
        let width = rows[0].len();
        if width < 2 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidConfig(
                "csv rows must share a width of at least 2 (features + response)".into(),
            ));
        }
        let n = rows.len();
        let p = width - 1;
        let x = Matrix::from_fn(n, p, |i, j| rows[i][j]);
        let y = Vector::from_fn(n, |i, _| rows[i][p]);
        LassoProblem::new(x, y)
    }

    /// Correlation vector X^T (y - X beta).
    fn correlation(&self, beta: &Vector) -> Vector {
        self.x.transpose() * (&self.y - &self.x * beta)
    }

    /// The prox-residual F(lambda, beta) whose root is the solution:
    /// beta - soft_threshold(beta + X^T(y - X beta), e^lambda).
    pub fn kkt_residual_map(&self, lambda: f64, beta: &Vector) -> Vector {
        let inner = beta + self.correlation(beta);
        beta - soft_threshold(&inner, lambda.exp())
    }
}

/// Componentwise sign(u) max(|u| - t, 0).
pub fn soft_threshold(u: &Vector, t: f64) -> Vector {
    assert!(t >= 0.0, "soft threshold requires t >= 0");
    u.map(|x| x.signum() * (x.abs() - t).max(0.0))
}

/// A solved Lasso instance at one penalty value.
#[derive(Debug, Clone)]
pub struct LassoSolution {
    pub beta_hat: Vector,
    pub lambda: f64,
    /// Indices with beta_hat != 0.
    pub support: Vec<usize>,
    /// Equicorrelation set: |X_i^T (y - X beta_hat)| = e^lambda within the
    /// relative tolerance. Contains the support.
    pub equicorrelation: Vec<usize>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// FISTA with step 1 / |X^T X|_2, stopping on the sup-norm of the
/// prox-residual.
pub fn solve_lasso(
    problem: &LassoProblem,
    lambda: f64,
    tol: f64,
    max_iterations: usize,
) -> Result<LassoSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig("lasso tolerance must be positive".into()));
    }
    let p = problem.num_features();
    let gram = problem.x.transpose() * &problem.x;
    let step = 1.0 / linalg::spectral_norm(&gram).max(f64::MIN_POSITIVE);
    let penalty = lambda.exp();

    let mut beta = Vector::zeros(p);
    let mut beta_prev = beta.clone();
    let mut t_k = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 0..max_iterations {
        residual = problem.kkt_residual_map(lambda, &beta).amax();
        if residual <= tol {
            return Ok(finish_solution(problem, lambda, beta, residual, it));
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let momentum = (t_k - 1.0) / t_next;
        let v = &beta + (&beta - &beta_prev) * momentum;
        let grad = &gram * &v - problem.x.transpose() * &problem.y;
        let next = soft_threshold(&(v - grad * step), step * penalty);
        beta_prev = beta;
        beta = next;
        t_k = t_next;
    }
    Err(Error::NoConvergence { iterations: max_iterations, residual })
}

fn finish_solution(
    problem: &LassoProblem,
    lambda: f64,
    beta: Vector,
    residual: f64,
    iterations: usize,
) -> LassoSolution {
    let penalty = lambda.exp();
    let corr = problem.correlation(&beta);
    let support: Vec<usize> = (0..beta.len()).filter(|&i| beta[i] != 0.0).collect();
    let equicorrelation: Vec<usize> = (0..beta.len())
        .filter(|&i| corr[i].abs() >= penalty * (1.0 - EQUICORRELATION_TOL))
        .collect();
    LassoSolution {
        beta_hat: beta,
        lambda,
        support,
        equicorrelation,
        kkt_residual: residual,
        iterations,
    }
}

/// Which element of the conservative derivative family to evaluate.
///
/// Admissible q vectors are 1 on the support, 0 off the equicorrelation set,
/// and in [0, 1] in between.
#[derive(Debug, Clone)]
pub enum QSelection {
    /// q = 1 on the whole equicorrelation set.
    Lars,
    /// q = 1 on the support only.
    WeakDerivative,
    Custom(Vector),
}

fn build_q(solution: &LassoSolution, q: &QSelection) -> Result<Vector> {
    let p = solution.beta_hat.len();
    let mut out = Vector::zeros(p);
    match q {
        QSelection::Lars => {
            for &i in &solution.equicorrelation {
                out[i] = 1.0;
            }
        }
        QSelection::WeakDerivative => {
            for &i in &solution.support {
                out[i] = 1.0;
            }
        }
        QSelection::Custom(v) => {
            if v.len() != p {
                return Err(Error::ShapeMismatch(format!(
                    "q has length {} but p = {p}",
                    v.len()
                )));
            }
            let in_e = |i: usize| solution.equicorrelation.contains(&i);
            let in_s = |i: usize| solution.support.contains(&i);
            for i in 0..p {
                let qi = v[i];
                let ok = if in_s(i) {
                    qi == 1.0
                } else if in_e(i) {
                    (0.0..=1.0).contains(&qi)
                } else {
                    qi == 0.0
                };
                if !ok {
                    return Err(Error::InvalidSelection(format!(
                        "q[{i}] = {qi} violates the admissible family at this solution"
                    )));
                }
                out[i] = qi;
            }
        }
    }
    Ok(out)
}

fn gate_equicorrelation_gram(
    problem: &LassoProblem,
    solution: &LassoSolution,
    rcond_tol: f64,
) -> Result<()> {
    let e = &solution.equicorrelation;
    if e.is_empty() {
        return Ok(());
    }
    let xe = problem.x.select_columns(e.iter());
    let gram = xe.transpose() * &xe;
    let rcond = linalg::rcond_estimate(&gram);
    if rcond < rcond_tol {
        return Err(Error::InvertibilityFailure { rcond, tol: rcond_tol });
    }
    Ok(())
}

/// d beta_hat / d lambda as the full p x p formula
/// -e^lambda (I - diag(q)(I - X^T X))^-1 diag(q) sign(beta + X^T(y - X beta)).
pub fn lasso_jacobian_selection(
    problem: &LassoProblem,
    solution: &LassoSolution,
    q: &QSelection,
    rcond_tol: f64,
) -> Result<Vector> {
    gate_equicorrelation_gram(problem, solution, rcond_tol)?;
    let qv = build_q(solution, q)?;
    let p = problem.num_features();
    let gram = problem.x.transpose() * &problem.x;
    // I - diag(q)(I - X^T X)
    let mut system = Matrix::identity(p, p);
    for i in 0..p {
        for j in 0..p {
            let eye = if i == j { 1.0 } else { 0.0 };
            system[(i, j)] -= qv[i] * (eye - gram[(i, j)]);
        }
    }
    let inner = &solution.beta_hat + problem.correlation(&solution.beta_hat);
    let rhs = Vector::from_fn(p, |i, _| qv[i] * inner[i].signum());
    let sol = linalg::lu_solve_with_tol(
        &system,
        &Matrix::from_column_slice(p, 1, rhs.as_slice()),
        rcond_tol,
    )
    .map_err(|e| match e {
        Error::SingularMatrix { rcond, tol } => Error::InvertibilityFailure { rcond, tol },
        other => other,
    })?;
    Ok(Vector::from_column_slice(sol.as_slice()) * (-solution.lambda.exp()))
}

/// Restricted closed form on a given index set: the derivative is supported
/// on `set` and solves (X_S^T X_S) d_S = -e^lambda sign(X_S^T (y - X beta)).
fn restricted_selection(
    problem: &LassoProblem,
    solution: &LassoSolution,
    set: &[usize],
    rcond_tol: f64,
) -> Result<Vector> {
    let p = problem.num_features();
    if set.is_empty() {
        return Ok(Vector::zeros(p));
    }
    let xs = problem.x.select_columns(set.iter());
    let gram = xs.transpose() * &xs;
    let rcond = linalg::rcond_estimate(&gram);
    if rcond < rcond_tol {
        return Err(Error::InvertibilityFailure { rcond, tol: rcond_tol });
    }
    let corr = problem.correlation(&solution.beta_hat);
    let sign = Vector::from_fn(set.len(), |k, _| corr[set[k]].signum());
    let d = linalg::lu_solve_with_tol(
        &gram,
        &Matrix::from_column_slice(set.len(), 1, sign.as_slice()),
        0.0,
    )?;
    let mut out = Vector::zeros(p);
    for (k, &i) in set.iter().enumerate() {
        out[i] = -solution.lambda.exp() * d[(k, 0)];
    }
    Ok(out)
}

/// The equicorrelation-set restricted formula (q = 1 on E).
pub fn lars_selection(
    problem: &LassoProblem,
    solution: &LassoSolution,
    rcond_tol: f64,
) -> Result<Vector> {
    restricted_selection(problem, solution, &solution.equicorrelation, rcond_tol)
}

/// The support-restricted formula (q = 1 on the support only).
pub fn weak_selection(
    problem: &LassoProblem,
    solution: &LassoSolution,
    rcond_tol: f64,
) -> Result<Vector> {
    restricted_selection(problem, solution, &solution.support, rcond_tol)
}

/// Outer step-size schedule for the penalty descent.
#[derive(Debug, Clone, Copy)]
pub enum Schedule {
    Constant { alpha: f64 },
    /// alpha0 / (1 + k)^gamma.
    Polynomial { alpha0: f64, gamma: f64 },
}

impl Schedule {
    pub fn step(&self, k: usize) -> f64 {
        match self {
            Schedule::Constant { alpha } => *alpha,
            Schedule::Polynomial { alpha0, gamma } => {
                alpha0 / (1.0 + k as f64).powf(*gamma)
            }
        }
    }
}

/// One outer-descent record.
#[derive(Debug, Clone)]
pub struct TuneRecord {
    pub step: usize,
    pub lambda: f64,
    pub criterion: f64,
    pub hypergradient: f64,
}

#[derive(Debug, Clone)]
pub struct TuneConfig {
    pub schedule: Schedule,
    pub max_steps: usize,
    pub inner_tol: f64,
    pub inner_max_iterations: usize,
    pub rcond_tol: f64,
    /// Stop early when |hypergradient| falls below this.
    pub gradient_tol: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            schedule: Schedule::Constant { alpha: 0.1 },
            max_steps: 500,
            inner_tol: 1e-12,
            inner_max_iterations: 200_000,
            rcond_tol: 1e-12,
            gradient_tol: 0.0,
        }
    }
}

/// Gradient descent on lambda for an outer criterion C(beta_hat(lambda));
/// the hypergradient is grad C at beta_hat dotted with the q-selection of
/// d beta_hat / d lambda.
pub fn tune_lambda(
    problem: &LassoProblem,
    criterion: &Tape,
    lambda0: f64,
    q: &QSelection,
    cfg: &TuneConfig,
) -> Result<Vec<TuneRecord>> {
    let p = problem.num_features();
    if criterion.input_arity() != p || criterion.output_arity() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "criterion must map R^{p} to R, got {} -> {}",
            criterion.input_arity(),
            criterion.output_arity()
        )));
    }
    let policy = crate::tape::SelectionPolicy::default();
    let mut lambda = lambda0;
    let mut records = Vec::with_capacity(cfg.max_steps);
    for k in 0..cfg.max_steps {
        let sol = solve_lasso(problem, lambda, cfg.inner_tol, cfg.inner_max_iterations)?;
        let dbeta = lasso_jacobian_selection(problem, &sol, q, cfg.rcond_tol)?;
        let cval = criterion.eval(&sol.beta_hat)?[0];
        let grad_c = criterion.jacobian_selection(&sol.beta_hat, &policy)?.matrix;
        let hyper = (grad_c * &dbeta)[(0, 0)];
        records.push(TuneRecord { step: k, lambda, criterion: cval, hypergradient: hyper });
        if hyper.abs() <= cfg.gradient_tol {
            break;
        }
        lambda -= cfg.schedule.step(k) * hyper;
    }
    Ok(records)
}
