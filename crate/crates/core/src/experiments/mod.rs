//! Experiment drivers behind the `pathgrad` binary.
//!
//! Each driver runs one of the documented gradient-dynamics studies (the
//! planar limit cycle and its perturbations, the coupled four-dimensional
//! billiard, the Lorenz-like implicit-gradient attractor, the Clarke-inverse
//! counterexample) or one of the applied pipelines (equilibrium-layer
//! training, Lasso penalty tuning, conic solution differentiation) and emits
//! a schema-versioned CSV for plotting.

pub mod billiard;
pub mod counterexample;
pub mod cycle;
pub mod drivers;
pub mod lorenz;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag stamped into the first line of every emitted CSV.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Shared experiment settings, deserialized from the `--config` JSON file.
/// Every field has a default so partial configs are accepted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Initial point; length is experiment specific.
    pub init: Vec<f64>,
    pub step: f64,
    pub iterations: usize,
    /// Variance of the Gaussian perturbations in the perturbed-cycle runs.
    pub sigma2: f64,
    /// Number of independent perturbation draws.
    pub draws: usize,
    /// Coupling weight of the second block in the billiard dynamics.
    pub eta: f64,
    pub seed: u64,
    /// Bypass the invertibility gate (pseudo-inverse fallback at singular
    /// selections) instead of erroring out.
    pub force_implicit: bool,
    /// Cost vector of the conic differentiation driver.
    pub conic_cost: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            init: vec![1.0, 1.0],
            step: 0.05,
            iterations: 5000,
            sigma2: 0.05,
            draws: 20,
            eta: (1.0 + 5.0f64.sqrt()) / 2.0,
            seed: 0,
            force_implicit: false,
            conic_cost: vec![-1.0, -1.0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::InvalidConfig("step size must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iteration count must be positive".into()));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::InvalidConfig("sigma2 must be nonnegative".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be positive".into()));
        }
        Ok(())
    }
}

/// Writes rows to `path` as CSV: a `# schema:` comment line, a header row,
/// then one record per row. All values are rendered with round-trip
/// precision.
pub fn write_csv(path: &Path, schema: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# schema: {schema} v{CSV_SCHEMA_VERSION}")?;
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!(
                "csv row has {} fields but header has {}",
                row.len(),
                header.len()
            )));
        }
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    let buf = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    std::fs::write(path, buf)?;
    Ok(())
}
