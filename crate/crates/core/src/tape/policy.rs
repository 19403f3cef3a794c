//! Selection policies: which element of the generalized derivative a
//! backward pass picks at points of nondifferentiability.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-kind rule for derivative values at kinks.
///
/// The fields are plain numbers on purpose: nothing clamps them to the
/// admissible generalized-derivative sets, so deliberately corrupted
/// selections can be injected for the measure-zero experiments. The shipped
/// constructors all stay inside the admissible sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// relu'(0), admissible in [0, 1].
    pub relu_at_zero: f64,
    /// Derivative assigned to sign at 0, admissible in [-1, 1].
    pub sign_at_zero: f64,
    /// |.|'(0), admissible in [-1, 1].
    pub abs_at_zero: f64,
    /// Weight on the first argument when max ties, admissible in [0, 1];
    /// the second argument gets 1 minus this.
    pub max_tie_weight: f64,
    /// Weight on the first argument when min ties, admissible in [0, 1].
    pub min_tie_weight: f64,
    /// Derivative of clamp exactly on a box boundary, admissible in [0, 1].
    pub clamp_at_boundary: f64,
    /// Derivative of the soft-threshold exactly at |u| = t, admissible in [0, 1].
    pub soft_threshold_at_kink: f64,
    /// When set, every kink draws uniformly from its admissible interval
    /// instead of using the fixed fields; the draw stream is seeded so a
    /// given evaluation is reproducible.
    pub randomize_seed: Option<u64>,
    /// Identifier recorded in the selections this policy produces.
    pub id: String,
}

impl Default for SelectionPolicy {
    /// The conventions of mainstream autodiff systems: zero at every kink,
    /// ties broken toward the first argument.
    fn default() -> Self {
        SelectionPolicy {
            relu_at_zero: 0.0,
            sign_at_zero: 0.0,
            abs_at_zero: 0.0,
            max_tie_weight: 1.0,
            min_tie_weight: 1.0,
            clamp_at_boundary: 0.0,
            soft_threshold_at_kink: 0.0,
            randomize_seed: None,
            id: "default".to_string(),
        }
    }
}

impl SelectionPolicy {
    pub fn randomized(seed: u64) -> Self {
        SelectionPolicy {
            randomize_seed: Some(seed),
            id: format!("randomized-{seed}"),
            ..SelectionPolicy::default()
        }
    }

    /// Deterministic family of kink-endpoint policies, used by stationarity
    /// diagnostics to sample vertices of the per-primitive Clarke sets.
    ///
    /// The first two variants are the two opposite extreme corners, so even
    /// `count == 2` brackets every kink interval; further variants cycle
    /// through mixed corners.
    pub fn kink_endpoint_variants(count: usize) -> Vec<SelectionPolicy> {
        let corner = |relu: f64, sgn: f64, abs: f64, tie: f64, k: usize| SelectionPolicy {
            relu_at_zero: relu,
            sign_at_zero: sgn,
            abs_at_zero: abs,
            max_tie_weight: tie,
            min_tie_weight: tie,
            clamp_at_boundary: relu,
            soft_threshold_at_kink: relu,
            randomize_seed: None,
            id: format!("endpoint-{k}"),
        };
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let v = match k {
                0 => corner(1.0, 1.0, 1.0, 1.0, k),
                1 => corner(0.0, -1.0, -1.0, 0.0, k),
                2 => corner(1.0, -1.0, 1.0, 0.0, k),
                3 => corner(0.0, 1.0, -1.0, 1.0, k),
                4 => corner(1.0, 1.0, -1.0, 0.0, k),
                5 => corner(0.0, -1.0, 1.0, 1.0, k),
                6 => corner(0.5, 0.0, 0.0, 0.5, k),
                _ => {
                    // fill the tail with randomized draws inside the sets
                    SelectionPolicy {
                        id: format!("endpoint-{k}"),
                        ..SelectionPolicy::randomized(k as u64)
                    }
                }
            };
            out.push(v);
        }
        out
    }

    pub(crate) fn pick(&self, fixed: f64, lo: f64, hi: f64, rng: &mut Option<impl Rng>) -> f64 {
        match rng {
            Some(r) => r.gen_range(lo..=hi),
            None => fixed,
        }
    }
}
