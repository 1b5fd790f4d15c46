//! Experiment runner: reads a JSON config, runs one experiment, writes CSV
//! artifacts and a `summary.json` with every check.

pub mod config;
mod fv;
mod kinetic;
pub mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

pub use config::{Experiment, ExperimentConfig};
pub use report::{Check, Report};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub enum RunError {
    /// Unreadable or invalid configuration; nothing was computed.
    Config(anyhow::Error),
    /// The computation itself failed.
    Runtime(anyhow::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e:#}"),
            RunError::Runtime(e) => write!(f, "run failed: {e:#}"),
        }
    }
}

impl std::error::Error for RunError {}

#[derive(Debug)]
pub struct Outcome {
    pub summary: PathBuf,
    pub output_dir: PathBuf,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }
}

/// Validated experiment, ready to run.
enum Prepared {
    Solve(kinetic::Setup),
    Derivative(kinetic::Setup, config::DerivativeBlock),
    Stationary(kinetic::StationarySetup),
    Flow(fv::FlowSetup),
    QuasiInvariance(fv::EnsembleSetup),
    Ibp(fv::EnsembleSetup, config::IbpBlock),
}

fn prepare(cfg: &ExperimentConfig) -> anyhow::Result<Prepared> {
    use kinflow_core::boltzmann::LambdaMode;
    Ok(match cfg.experiment {
        Experiment::BoltzmannSolve => Prepared::Solve(kinetic::Setup::new(cfg, LambdaMode::D)?),
        Experiment::BoltzmannDerivativeCheck => {
            cfg.derivative.validate()?;
            Prepared::Derivative(kinetic::Setup::new(cfg, LambdaMode::A)?, cfg.derivative.clone())
        }
        Experiment::KnudsenStationary => Prepared::Stationary(kinetic::StationarySetup::new(cfg)?),
        Experiment::FvFlow => Prepared::Flow(fv::FlowSetup::new(&cfg.spectral)?),
        Experiment::FvQuasiInvariance => Prepared::QuasiInvariance(fv::EnsembleSetup::new(&cfg.ensemble)?),
        Experiment::FvIbp => {
            cfg.ibp.validate(cfg.ensemble.j)?;
            Prepared::Ibp(fv::EnsembleSetup::new(&cfg.ensemble)?, cfg.ibp.clone())
        }
    })
}

/// Parses, validates and runs the experiment in `config_path`.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<Outcome, RunError> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("cannot read {}", config_path.display()))
        .map_err(RunError::Config)?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(RunError::Config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    run_config(&cfg, &dir)
}

/// Runs an already parsed config, writing into `dir`.
pub fn run_config(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome, RunError> {
    let prepared = prepare(cfg).map_err(RunError::Config)?;
    let mut report = Report::new(dir, cfg.experiment.name(), cfg.seed).map_err(RunError::Runtime)?;
    let seed = cfg.seed;
    let result = match prepared {
        Prepared::Solve(s) => kinetic::solve(&s, &mut report),
        Prepared::Derivative(s, d) => kinetic::derivative_check(&s, &d, seed, &mut report),
        Prepared::Stationary(s) => kinetic::stationary(&s, seed, &mut report),
        Prepared::Flow(s) => fv::flow(&s, &mut report),
        Prepared::QuasiInvariance(s) => fv::quasi_invariance(&s, seed, &mut report),
        Prepared::Ibp(s, b) => fv::ibp(&s, &b, seed, &mut report),
    };
    result.map_err(RunError::Runtime)?;
    let summary = report.finish().map_err(RunError::Runtime)?;
    Ok(Outcome {
        summary,
        output_dir: dir.to_path_buf(),
        checks: report.checks().to_vec(),
    })
}
