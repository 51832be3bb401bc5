//! Batch front end: TOML experiment configs, multi-seed runs with resumable
//! run directories, summaries and plots.

pub mod config;
pub mod experiment;
pub mod plot;

use std::sync::Arc;

use anyhow::bail;
use asnpe::simulators::{ExternalConfig, ExternalSimulator, Simulator};

pub use config::{ExperimentConfig, MethodKind, MetricKind, TaskConfig};
pub use experiment::{resume_experiment, run_experiment, RunOptions, RunReport};

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    ResumeRefused(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::ResumeRefused(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
            CliError::ResumeRefused(m) => write!(f, "refusing to resume: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Outcome of probing an external simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorCheck {
    pub theta: Vec<f64>,
    pub output: Vec<f64>,
    /// The same seed gave the same output twice.
    pub seeded_repeat: bool,
    pub restarts: u64,
}

/// Spawn the child, send `theta` with seed 0 twice and check the answers.
pub fn validate_simulator(config: ExternalConfig, theta: Option<Vec<f64>>) -> anyhow::Result<SimulatorCheck> {
    let theta = theta.unwrap_or_else(|| vec![0.0; config.theta_dim]);
    if theta.len() != config.theta_dim {
        bail!("probe θ has dimension {}, simulator expects {}", theta.len(), config.theta_dim);
    }
    let x_dim = config.x_dim;
    let sim = Arc::new(ExternalSimulator::new(config)?);
    let first = sim.simulate(&theta, 0)?;
    if first.len() != x_dim {
        bail!("simulator returned {} values, expected {x_dim}", first.len());
    }
    if first.iter().any(|v| !v.is_finite()) {
        bail!("simulator returned non-finite values");
    }
    let second = sim.simulate(&theta, 0)?;
    Ok(SimulatorCheck {
        theta,
        seeded_repeat: first == second,
        output: first,
        restarts: sim.restarts(),
    })
}
