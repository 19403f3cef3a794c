//! Command-line interface of the `pathgrad` binary.
//!
//! Subcommands run the experiment drivers and write schema-versioned CSV
//! artifacts. Exit codes: 0 on success, 2 when an invertibility gate
//! rejects a run that was not forced, 1 on configuration errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiments::{
    billiard, counterexample, cycle, drivers, lorenz, write_csv, ExperimentConfig,
};
use crate::lasso::TuneConfig;
use crate::sgd::SGDConfig;

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_CONFIG_ERROR: i32 = 1;
pub const EXIT_GATE_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "pathgrad",
    about = "Nonsmooth implicit-differentiation experiments",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output CSV path (defaults to <subcommand>.csv).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bypass invertibility gates with a pseudo-inverse fallback.
    #[arg(long, global = true)]
    force_implicit: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Gradient descent through the planar fixed-point layer.
    Cycle,
    /// Twenty perturbed realizations of the cycle experiment.
    CyclePerturbed,
    /// Coupled planar cycles filling a 2d projection in R^4.
    Billiard4d,
    /// Implicit-vs-plain ascent on the Lorenz-like bilevel problem.
    Lorenz,
    /// Clarke-inverse counterexample dimensions and inverses.
    Counterexample,
    /// Stochastic training of the equilibrium-layer toy.
    DeqTrain,
    /// Held-out hypergradient descent on the Lasso penalty.
    LassoTune,
    /// Solve and differentiate a box linear program.
    ConicDiff,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Cycle => "cycle",
            Command::CyclePerturbed => "cycle-perturbed",
            Command::Billiard4d => "billiard4d",
            Command::Lorenz => "lorenz",
            Command::Counterexample => "counterexample",
            Command::DeqTrain => "deq-train",
            Command::LassoTune => "lasso-tune",
            Command::ConicDiff => "conic-diff",
        }
    }

    fn default_config(self) -> ExperimentConfig {
        match self {
            Command::Billiard4d => billiard::default_billiard_config(),
            Command::Lorenz => lorenz::default_lorenz_config(),
            _ => ExperimentConfig::default(),
        }
    }
}

/// Parses arguments from the process environment, runs the selected
/// experiment, and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG_ERROR } else { EXIT_SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvertibilityFailure { .. } | Error::SingularMatrix { .. } => {
                    EXIT_GATE_FAILURE
                }
                _ => EXIT_CONFIG_ERROR,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => cli.command.default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.force_implicit {
        cfg.force_implicit = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", cli.command.name())));
    match cli.command {
        Command::Cycle => run_cycle(&cfg, &out),
        Command::CyclePerturbed => run_cycle_perturbed(&cfg, &out),
        Command::Billiard4d => run_billiard(&cfg, &out),
        Command::Lorenz => run_lorenz(&cfg, &out),
        Command::Counterexample => run_counterexample(&out),
        Command::DeqTrain => run_deq_train(&cfg, &out),
        Command::LassoTune => run_lasso_tune(&cfg, &out),
        Command::ConicDiff => run_conic_diff(&cfg, &out),
    }
}

fn run_cycle(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let run = cycle::run_cycle(cfg)?;
    let rows: Vec<Vec<f64>> = run
        .records
        .iter()
        .map(|r| vec![r.k as f64, r.x, r.y, r.s1, r.s2, r.loss])
        .collect();
    write_csv(out, "cycle", &["k", "x", "y", "s1", "s2", "loss"], &rows)?;
    let rec = &run.recurrence;
    println!(
        "cycle: {} iterations, recurrent = {}, min return distance = {:.3e}, min step = {:.3e}",
        run.records.len() - 1,
        rec.recurrent,
        rec.min_return_distance,
        rec.min_step_displacement
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run_cycle_perturbed(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let draws = cycle::run_cycle_perturbed(cfg)?;
    let mut rows = Vec::new();
    for (i, d) in draws.iter().enumerate() {
        for r in &d.run.records {
            rows.push(vec![i as f64, r.k as f64, r.x, r.y, r.s1, r.s2, r.loss]);
        }
    }
    write_csv(
        out,
        "cycle-perturbed",
        &["draw", "k", "x", "y", "s1", "s2", "loss"],
        &rows,
    )?;
    let recurrent = draws.iter().filter(|d| d.run.recurrence.recurrent).count();
    println!(
        "cycle-perturbed: {recurrent}/{} draws recurrent at sigma2 = {}",
        draws.len(),
        cfg.sigma2
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run_billiard(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let run = billiard::run_billiard4d(cfg)?;
    let rows: Vec<Vec<f64>> = run
        .records
        .iter()
        .map(|r| vec![r.k as f64, r.x, r.y, r.z, r.w])
        .collect();
    write_csv(out, "billiard4d", &["k", "x", "y", "z", "w"], &rows)?;
    for (n, count) in &run.occupancy {
        println!("billiard4d: {count} occupied (y, z) grid cells after {n} iterations");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_lorenz(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let run = lorenz::run_lorenz(cfg)?;
    // mode 0: reference ODE, 1: implicit ascent, 2: plain quadratic ascent
    let mut rows = Vec::new();
    for (mode, traj) in [(0.0, &run.reference), (1.0, &run.implicit), (2.0, &run.plain)] {
        for r in traj {
            rows.push(vec![mode, r[0], r[1], r[2], r[3]]);
        }
    }
    write_csv(out, "lorenz", &["mode", "k", "x", "y", "z"], &rows)?;
    println!(
        "lorenz: implicit max norm = {:.3}, plain ascent diverged = {}",
        run.implicit_max_norm, run.plain_diverged
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run_counterexample(out: &Path) -> Result<()> {
    let rep = counterexample::run_counterexample();
    // set 0: forward generators, 1: inverse-map generators, 2: computed
    // inverses of the forward generators
    let mut rows = Vec::new();
    for (set, mats) in [
        (0.0, &rep.phi_generators),
        (1.0, &rep.psi_generators),
        (2.0, &rep.phi_inverses),
    ] {
        for (i, m) in mats.iter().enumerate() {
            rows.push(vec![set, i as f64, m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]);
        }
    }
    write_csv(
        out,
        "counterexample",
        &["set", "index", "m11", "m12", "m21", "m22"],
        &rows,
    )?;
    println!(
        "counterexample: affine dimensions {} (forward) vs {} (inverse), \
         max inverse error {:.3e}, inverse escapes hull = {}",
        rep.dim_phi, rep.dim_psi, rep.max_inverse_error, rep.inverse_outside_affine_hull
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run_deq_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let sgd = SGDConfig {
        seed: cfg.seed,
        max_steps: cfg.iterations,
        alpha0: cfg.step,
        record_stride: (cfg.iterations / 500).max(1),
        ..Default::default()
    };
    let report = drivers::run_deq_train(4, 5, &sgd, cfg.seed)?;
    let rows: Vec<Vec<f64>> = report
        .trajectory
        .records
        .iter()
        .zip(&report.mean_losses)
        .map(|(r, &mean)| vec![r.step as f64, r.loss, mean, r.gradient_norm])
        .collect();
    write_csv(
        out,
        "deq-train",
        &["step", "sample_loss", "mean_loss", "gradient_norm"],
        &rows,
    )?;
    println!(
        "deq-train: final mean loss = {:.6}, stationarity = {:.3e}",
        report.mean_losses.last().unwrap(),
        report.final_stationarity
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run_lasso_tune(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let tune = TuneConfig {
        max_steps: cfg.iterations.min(3000),
        gradient_tol: 1e-8,
        ..TuneConfig::default()
    };
    let records = drivers::run_lasso_tune(cfg.seed, 1.0, &tune)?;
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| vec![r.step as f64, r.lambda, r.criterion, r.hypergradient])
        .collect();
    write_csv(
        out,
        "lasso-tune",
        &["step", "lambda", "criterion", "hypergradient"],
        &rows,
    )?;
    let last = records.last().unwrap();
    println!(
        "lasso-tune: {} steps, log-penalty = {:.6}, held-out loss = {:.6}",
        records.len(),
        last.lambda,
        last.criterion
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run_conic_diff(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let rep = drivers::run_conic_diff(&cfg.conic_cost, cfg.force_implicit)?;
    match (&rep.jacobian, &rep.gate_error) {
        (Some(_), Some(msg)) => println!("conic-diff: gate bypassed in force mode ({msg})"),
        (None, Some(_)) => {
            // re-derive the gate failure with its rcond witness so the
            // process exit code reflects it
            let problem = drivers::box_lp_problem(&cfg.conic_cost)?;
            let err = crate::conic::sol_jacobian_selection(
                &problem,
                &rep.z,
                &crate::tape::SelectionPolicy::default(),
                1e-12,
            )
            .expect_err("gate failure reported but the selection succeeded");
            return Err(err);
        }
        _ => {}
    }
    let jac = rep.jacobian.as_ref().expect("jacobian present when no gate error");
    let mut rows = Vec::new();
    for i in 0..jac.nrows() {
        for j in 0..jac.ncols() {
            rows.push(vec![i as f64, j as f64, jac[(i, j)]]);
        }
    }
    write_csv(out, "conic-diff", &["row", "col", "dsol_dparam"], &rows)?;
    println!(
        "conic-diff: x = ({:.6}, {:.6}), KKT stationarity {:.3e}, feasibility {:.3e}",
        rep.solution.x[0], rep.solution.x[1], rep.kkt.stationarity, rep.kkt.primal_feasibility
    );
    println!("wrote {}", out.display());
    Ok(())
}
