//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A square matrix was numerically singular (reciprocal condition
    /// estimate below the requested tolerance, or exactly rank deficient).
    #[error("singular matrix (rcond estimate {rcond:.3e} < tolerance {tol:.3e})")]
    SingularMatrix { rcond: f64, tol: f64 },

    /// The invertibility gate on the variable block of a selection failed.
    /// Carries the offending reciprocal condition estimate as a witness.
    #[error("invertibility gate failed: rcond({rcond:.3e}) < {tol:.3e}")]
    InvertibilityFailure { rcond: f64, tol: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    /// A primitive was evaluated outside its domain (log of a nonpositive
    /// number, real power of a nonpositive base, ...).
    #[error("domain error: {0}")]
    DomainError(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Iterate norm exceeded the configured divergence bound.
    #[error("divergence detected at step {step}: |w| = {norm:.3e} exceeds bound {bound:.3e}")]
    DivergenceDetected { step: usize, norm: f64, bound: f64 },

    /// A q-vector outside the admissible selection family.
    #[error("invalid selection: {0}")]
    InvalidSelection(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
