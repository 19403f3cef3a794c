//! Nonsmooth automatic and implicit differentiation with conservative
//! Jacobian selections.
//!
//! The crate provides a reverse-mode tape over path-differentiable
//! primitives, implicit differentiation of fixed points with an explicit
//! invertibility gate, deep-equilibrium and convex-cone layers, a Lasso
//! hyperparameter map, stochastic subgradient training, and the experiment
//! drivers behind the `pathgrad` binary.

pub mod cli;
pub mod conic;
pub mod deq;
pub mod error;
pub mod experiments;
pub mod implicit;
pub mod lasso;
pub mod linalg;
pub mod sgd;
pub mod tape;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use tape::{JacobianSelection, SelectionPolicy, Tape};
