//! Quasi-chaotic gradient dynamics in R^4 from two coupled planar cycles.
//!
//! The objective is the block-separable sum g(x, y, z, w) = f(x, y) +
//! eta f(z, w) with f the planar cycle loss. Each block runs its own limit
//! cycle; eta makes one cycle faster than the other, so the projection of
//! the path onto the mixed coordinates (y, z) progressively fills a region
//! instead of closing up.

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::tape::SelectionPolicy;

use super::cycle::CycleKernel;
use super::ExperimentConfig;

/// Iteration checkpoints at which the covered-area statistic is reported.
pub const OCCUPANCY_CHECKPOINTS: [usize; 3] = [500, 1000, 5000];
/// Side length of the occupancy grid over the (y, z) bounding box.
pub const OCCUPANCY_GRID: usize = 50;

#[derive(Debug, Clone, Copy)]
pub struct BilliardRecord {
    pub k: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct BilliardRun {
    pub records: Vec<BilliardRecord>,
    /// (checkpoint, occupied cells of the 50 x 50 grid over the full-path
    /// (y, z) bounding box, counted over the first `checkpoint` iterates).
    pub occupancy: Vec<(usize, usize)>,
}

/// Number of grid cells hit by the first `upto` points, on a `grid` x `grid`
/// partition of the bounding box of all `points`.
pub fn occupancy_count(points: &[[f64; 2]], grid: usize, upto: usize) -> usize {
    if points.is_empty() || grid == 0 {
        return 0;
    }
    let (mut lo0, mut hi0, mut lo1, mut hi1) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo0 = lo0.min(p[0]);
        hi0 = hi0.max(p[0]);
        lo1 = lo1.min(p[1]);
        hi1 = hi1.max(p[1]);
    }
    let span0 = (hi0 - lo0).max(f64::MIN_POSITIVE);
    let span1 = (hi1 - lo1).max(f64::MIN_POSITIVE);
    let mut cells = vec![false; grid * grid];
    let mut count = 0;
    for p in points.iter().take(upto) {
        let i = (((p[0] - lo0) / span0 * grid as f64) as usize).min(grid - 1);
        let j = (((p[1] - lo1) / span1 * grid as f64) as usize).min(grid - 1);
        if !cells[i * grid + j] {
            cells[i * grid + j] = true;
            count += 1;
        }
    }
    count
}

/// Defaults tailored to this experiment: with the cycle's step size the two
/// discrete orbits lock into short exact periods and the projection stops
/// filling, so the billiard runs at a finer step and desynchronized blocks.
pub fn default_billiard_config() -> ExperimentConfig {
    ExperimentConfig {
        init: vec![1.0, 1.0, 0.5, 2.0],
        step: 0.01,
        ..Default::default()
    }
}

/// Gradient descent on the coupled objective from `cfg.init` (length 4).
pub fn run_billiard4d(cfg: &ExperimentConfig) -> Result<BilliardRun> {
    cfg.validate()?;
    if cfg.init.len() != 4 {
        return Err(Error::InvalidConfig("billiard4d needs a 4-dimensional initial point".into()));
    }
    let kernel = CycleKernel::base(true);
    let policy = SelectionPolicy::default();
    let mut first = Vector::from_vec(vec![cfg.init[0], cfg.init[1]]);
    let mut second = Vector::from_vec(vec![cfg.init[2], cfg.init[3]]);
    let mut s1 = Vector::from_vec(vec![1.5, 2.5]);
    let mut s2 = s1.clone();
    let mut records = Vec::with_capacity(cfg.iterations + 1);
    for k in 0..=cfg.iterations {
        records.push(BilliardRecord {
            k,
            x: first[0],
            y: first[1],
            z: second[0],
            w: second[1],
        });
        if k == cfg.iterations {
            break;
        }
        s1 = kernel.solve_inner(&first, &s1)?;
        s2 = kernel.solve_inner(&second, &s2)?;
        let g1 = kernel.gradient(&first, &s1, &policy)?;
        let g2 = kernel.gradient(&second, &s2, &policy)?;
        first -= g1 * cfg.step;
        second -= g2 * (cfg.eta * cfg.step);
    }
    let projected: Vec<[f64; 2]> = records.iter().map(|r| [r.y, r.z]).collect();
    let occupancy = OCCUPANCY_CHECKPOINTS
        .iter()
        .map(|&n| (n, occupancy_count(&projected, OCCUPANCY_GRID, n.min(projected.len()))))
        .collect();
    Ok(BilliardRun { records, occupancy })
}
