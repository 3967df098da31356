//! Experiment runner for `vbgp`: simulate data, fit the exact GP, train the
//! variational bridge and criticize it with MMD tests. Every command writes
//! CSV files into the output directory.

pub mod commands;
pub mod config;
pub mod io;

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{Experiment, PathSource};
pub use config::{ExperimentConfig, Reference};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<vbgp_core::Error> for CliError {
    fn from(e: vbgp_core::Error) -> Self {
        use vbgp_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::Unsupported(_) => CliError::Config(e.to_string()),
            E::Numerical(_) | E::Diverged { .. } => CliError::Numerical(e.to_string()),
            E::Checkpoint(_) => CliError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vbgp", version, about = "GP regression through variational SDE bridges")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a latent path from the GP prior and noisy observations of it.
    Simulate,
    /// Exact GP posterior on the grid with a 95% band.
    FitExact {
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Use the Kalman/RTS smoother instead of batch regression.
        #[arg(long)]
        kalman: bool,
    },
    /// Train the variational bridge and emit paths.
    TrainVb {
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// MMD two-sample test of variational paths against GP samples.
    Criticize {
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["checkpoint", "self_test"])]
        paths: Option<PathBuf>,
        /// Generate the paths from this checkpoint instead of reading a file.
        #[arg(long, conflicts_with = "self_test")]
        checkpoint: Option<PathBuf>,
        /// Replace the paths by GP samples (calibration check).
        #[arg(long)]
        self_test: bool,
    },
    /// Run a full study.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    ExpGp,
    CriticizeSweep,
    Nonlinear,
}

impl From<ExperimentName> for Experiment {
    fn from(n: ExperimentName) -> Self {
        match n {
            ExperimentName::ExpGp => Experiment::ExpGp,
            ExperimentName::CriticizeSweep => Experiment::CriticizeSweep,
            ExperimentName::Nonlinear => Experiment::Nonlinear,
        }
    }
}

/// Config file (if any) over the command's defaults, then flag overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.command {
        Command::Experiment { name } => Experiment::from(*name).base_config(),
        _ => ExperimentConfig::default(),
    };
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse_onto(base, &text)?
        }
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn observations_at(cfg: &ExperimentConfig, given: &Option<PathBuf>) -> Result<vbgp_core::Observations, CliError> {
    let path = given
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(commands::OBSERVATIONS_FILE));
    io::read_observations(&path)
}

/// Runs one parsed invocation; returns a short human-readable summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load_config(cli)?;
    let out = cfg.out_dir.display().to_string();
    match &cli.command {
        Command::Simulate => {
            let sim = commands::simulate(&cfg)?;
            Ok(format!("simulated {} observations into {out}", sim.obs.len()))
        }
        Command::FitExact { observations, kalman } => {
            let obs = observations_at(&cfg, observations)?;
            let fit = commands::fit_exact(&cfg, &obs, *kalman)?;
            Ok(format!(
                "exact posterior on {} grid points written to {out}",
                fit.grid.len()
            ))
        }
        Command::TrainVb {
            observations,
            checkpoint,
        } => {
            let obs = observations_at(&cfg, observations)?;
            let from = checkpoint.as_deref().map(io::read_checkpoint).transpose()?;
            let art = commands::train_vb(&cfg, &obs, from)?;
            let last = art.outcome.trace.last().copied().unwrap_or(f64::NAN);
            Ok(format!(
                "trained to epoch {} (last ELBO {last:.4}); outputs in {out}",
                art.outcome.last.epoch
            ))
        }
        Command::Criticize {
            observations,
            paths,
            checkpoint,
            self_test,
        } => {
            let obs = observations_at(&cfg, observations)?;
            let source = if *self_test {
                PathSource::SelfTest
            } else if let Some(c) = checkpoint {
                PathSource::Checkpoint(c.clone())
            } else {
                PathSource::File(paths.clone().unwrap_or_else(|| cfg.out_dir.join(commands::PATHS_FILE)))
            };
            let c = commands::criticize(&cfg, &obs, &source)?;
            Ok(format!(
                "MMD² = {:.6}, threshold = {:.6}, reject = {}",
                c.report.mmd2, c.report.threshold, c.report.reject
            ))
        }
        Command::Experiment { name } => {
            let res = commands::experiment((*name).into(), &cfg)?;
            let mut msg = format!("experiment {:?} written to {out}", name);
            for row in &res.sweep {
                msg.push_str(&format!(
                    "\n  epoch {:>6}: MMD² = {:.6} (threshold {:.6})",
                    row.epoch, row.criticism.report.mmd2, row.criticism.report.threshold
                ));
            }
            Ok(msg)
        }
    }
}
