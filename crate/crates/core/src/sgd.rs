//! Stochastic subgradient descent on finite sums with conservative-Jacobian
//! selections, plus an empirical Clarke-stationarity diagnostic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::tape::{SelectionPolicy, Tape};

/// One summand of the objective. Implementors supply a value and one
/// element of their conservative gradient under a given policy.
pub trait LossTerm {
    fn value(&self, w: &Vector) -> Result<f64>;
    fn gradient_selection(&self, w: &Vector, policy: &SelectionPolicy) -> Result<Vector>;
}

impl LossTerm for Tape {
    fn value(&self, w: &Vector) -> Result<f64> {
        let out = self.eval(w)?;
        if out.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss tape must be scalar-valued, got arity {}",
                out.len()
            )));
        }
        Ok(out[0])
    }

    fn gradient_selection(&self, w: &Vector, policy: &SelectionPolicy) -> Result<Vector> {
        let j = self.jacobian_selection(w, policy)?.matrix;
        if j.nrows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss tape must be scalar-valued, got arity {}",
                j.nrows()
            )));
        }
        Ok(j.row(0).transpose())
    }
}

/// ell(w) = (1/N) sum of terms.
pub struct SumProblem {
    terms: Vec<Box<dyn LossTerm>>,
    dim: usize,
}

impl SumProblem {
    pub fn new(terms: Vec<Box<dyn LossTerm>>, dim: usize) -> Result<Self> {
        if terms.is_empty() || dim == 0 {
            return Err(Error::InvalidConfig("sum problem needs terms and dim >= 1".into()));
        }
        Ok(SumProblem { terms, dim })
    }

    pub fn from_tapes(tapes: Vec<Tape>) -> Result<Self> {
        let dim = tapes.first().map(|t| t.input_arity()).unwrap_or(0);
        for t in &tapes {
            if t.input_arity() != dim || t.output_arity() != 1 {
                return Err(Error::ShapeMismatch(
                    "all loss tapes must share the input arity and be scalar".into(),
                ));
            }
        }
        SumProblem::new(
            tapes.into_iter().map(|t| Box::new(t) as Box<dyn LossTerm>).collect(),
            dim,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn term(&self, i: usize) -> &dyn LossTerm {
        self.terms[i].as_ref()
    }

    pub fn mean_value(&self, w: &Vector) -> Result<f64> {
        let mut acc = 0.0;
        for t in &self.terms {
            acc += t.value(w)?;
        }
        Ok(acc / self.terms.len() as f64)
    }

    pub fn mean_gradient_selection(
        &self,
        w: &Vector,
        policy: &SelectionPolicy,
    ) -> Result<Vector> {
        let mut acc = Vector::zeros(self.dim);
        for t in &self.terms {
            acc += t.gradient_selection(w, policy)?;
        }
        Ok(acc / self.terms.len() as f64)
    }
}

/// Step sizes alpha_k = alpha0 / (1 + k)^gamma and a run-level random scale
/// s ~ U(s_min, s_max).
///
/// gamma may sit anywhere in (0, 1]; the convergence guarantee needs the
/// divergent-sum plus o(1/log k) regime, which this family satisfies for
/// every such gamma.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SGDConfig {
    pub alpha0: f64,
    pub gamma: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub seed: u64,
    pub max_steps: usize,
    /// Record every this-many steps (the final step is always recorded).
    pub record_stride: usize,
    /// Iterate-norm bound standing in for the boundedness assumption.
    pub divergence_bound: f64,
    pub policy: SelectionPolicy,
}

impl Default for SGDConfig {
    fn default() -> Self {
        SGDConfig {
            alpha0: 0.1,
            gamma: 0.6,
            s_min: 0.5,
            s_max: 1.5,
            seed: 0,
            max_steps: 10_000,
            record_stride: 100,
            divergence_bound: 1e8,
            policy: SelectionPolicy::default(),
        }
    }
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma = {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.alpha0 > 0.0) {
            return Err(Error::InvalidConfig("alpha0 must be positive".into()));
        }
        if !(self.s_min > 0.0 && self.s_min <= self.s_max) {
            return Err(Error::InvalidConfig("need 0 < s_min <= s_max".into()));
        }
        if self.max_steps == 0 || self.record_stride == 0 {
            return Err(Error::InvalidConfig("max_steps and record_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, k: usize) -> f64 {
        self.alpha0 / (1.0 + k as f64).powf(self.gamma)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub loss: f64,
    pub gradient_norm: f64,
    pub batch_index: usize,
    pub w: Vector,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub final_w: Vector,
    /// The run-level scale drawn from the seed.
    pub scale: f64,
}

/// Runs w_{k+1} = w_k - s alpha_k v_k with v_k a selection of the sampled
/// term's conservative gradient. Deterministic given the seed.
pub fn sgd_run(problem: &SumProblem, w0: &Vector, cfg: &SGDConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if w0.len() != problem.dim() {
        return Err(Error::ShapeMismatch(format!(
            "w0 has length {} but problem dim is {}",
            w0.len(),
            problem.dim()
        )));
    }
    crate::linalg::ensure_finite_vec(w0, "initial iterate")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = if cfg.s_min == cfg.s_max {
        cfg.s_min
    } else {
        rng.gen_range(cfg.s_min..cfg.s_max)
    };
    let mut w = w0.clone();
    let mut records = Vec::new();
    for k in 0..cfg.max_steps {
        let batch_index = rng.gen_range(0..problem.num_terms());
        let term = problem.term(batch_index);
        let v = term.gradient_selection(&w, &cfg.policy)?;
        if k % cfg.record_stride == 0 || k + 1 == cfg.max_steps {
            records.push(TrajectoryRecord {
                step: k,
                loss: term.value(&w)?,
                gradient_norm: v.norm(),
                batch_index,
                w: w.clone(),
            });
        }
        w -= &v * (scale * cfg.step_size(k));
        let norm = w.norm();
        if !norm.is_finite() || norm > cfg.divergence_bound {
            return Err(Error::DivergenceDetected {
                step: k,
                norm,
                bound: cfg.divergence_bound,
            });
        }
    }
    Ok(Trajectory { records, final_w: w, scale })
}

/// Exact minimum norm over the convex hull of a small point set, by
/// enumerating active subsets of the simplex (practical for <= 12 points).
pub fn min_norm_in_hull(points: &[Vector]) -> f64 {
    assert!(!points.is_empty(), "hull of an empty set");
    assert!(
        points.len() <= 12,
        "subset enumeration limited to 12 points, got {}",
        points.len()
    );
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) {
        let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = subset.len();
        if k == 1 {
            best = best.min(points[subset[0]].norm());
            continue;
        }
        // minimize |sum l_i g_i|^2 over the affine slice sum l_i = 1, then
        // keep the candidate only if it is a proper convex combination
        let dim = points[0].len();
        let mut g = Matrix::zeros(dim, k);
        for (c, &i) in subset.iter().enumerate() {
            g.set_column(c, &points[i]);
        }
        let q = g.transpose() * &g;
        let mut kkt = Matrix::zeros(k + 1, k + 1);
        kkt.view_mut((0, 0), (k, k)).copy_from(&(&q * 2.0));
        for i in 0..k {
            kkt[(i, k)] = 1.0;
            kkt[(k, i)] = 1.0;
        }
        let mut rhs = Vector::zeros(k + 1);
        rhs[k] = 1.0;
        let solved = kkt.lu().solve(&Matrix::from_column_slice(
            k + 1,
            1,
            rhs.as_slice(),
        ));
        let Some(sol) = solved else { continue };
        let lambda: Vec<f64> = (0..k).map(|i| sol[(i, 0)]).collect();
        if lambda.iter().any(|&l| l < -1e-10) {
            continue;
        }
        let mut point = Vector::zeros(dim);
        for (c, &i) in subset.iter().enumerate() {
            point += &points[i] * lambda[c];
        }
        best = best.min(point.norm());
    }
    best
}

/// Inner-approximate Clarke-stationarity: the minimum norm over the convex
/// hull of mean-gradient selections gathered from `num_policies` deterministic
/// kink-endpoint policy variants.
pub fn stationarity_measure(
    problem: &SumProblem,
    w: &Vector,
    num_policies: usize,
) -> Result<f64> {
    let variants = SelectionPolicy::kink_endpoint_variants(num_policies.clamp(1, 12));
    let mut selections = Vec::with_capacity(variants.len());
    for policy in &variants {
        let g = problem.mean_gradient_selection(w, policy)?;
        // skip near-duplicates to keep the hull enumeration small
        if !selections.iter().any(|s: &Vector| (s - &g).amax() < 1e-14) {
            selections.push(g);
        }
    }
    Ok(min_norm_in_hull(&selections))
}
