//! The subcommands. Each one is a pure function of the config, its input
//! files and the seed; all randomness comes from tagged sub-seeds.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use vbgp_core::ssm::merge_grid;
use vbgp_core::vb::{
    generate_paths, resume, Adam, Checkpoint, ElboProblem, Likelihood, TrainOutcome, VariationalParams,
};
use vbgp_core::{
    build_ssm, fit_hyperparams, gp_regress, gp_sample, kalman_smooth, mmd_test, rng, Error, KernelHyperparams,
    MmdReport, Observations, PathBundle, TimeGrid,
};

use crate::config::{ExperimentConfig, Reference};
use crate::io::{self, Table};
use crate::CliError;

const TAG_TRUTH: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_PATHS: u64 = 5;
const TAG_REFERENCE: u64 = 6;
const TAG_PERMUTATION: u64 = 7;
const TAG_SELF_TEST: u64 = 8;

const GRID_TOL: f64 = 1e-9;

pub const TRUTH_FILE: &str = "truth.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const POSTERIOR_FILE: &str = "posterior.csv";
pub const TRACE_FILE: &str = "elbo_trace.csv";
pub const PATHS_FILE: &str = "paths.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "mmd_report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Latent path and data drawn by [`simulate`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub grid: Vec<f64>,
    pub latent: Vec<f64>,
    pub obs: Observations,
}

/// Draws one latent path from the exact GP prior on the merged grid and
/// noisy observations `y = h(u(τ)) + ε` at the configured times.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation, CliError> {
    let times = cfg.observation_times();
    let uniform = TimeGrid::uniform(cfg.t_start, cfg.t_end, cfg.grid_steps)?;
    let grid = merge_grid(uniform.points(), &times);
    let prior = gp_regress(cfg.kernel, &cfg.hyperparams(), &Observations::empty(), &grid)?;
    let draw = gp_sample(&prior, 1, rng::derive(cfg.seed, TAG_TRUTH))?;
    let latent = draw.projected(0);

    let mut noise = rng::stream(rng::derive(cfg.seed, TAG_NOISE), 0);
    let sd = cfg.sigma2_y.sqrt();
    let mut values = Vec::with_capacity(times.len());
    for &tau in &times {
        let k = grid
            .iter()
            .position(|&t| (t - tau).abs() <= 1e-12)
            .expect("observation times are merged into the grid");
        let eps: f64 = noise.sample(StandardNormal);
        values.push(cfg.likelihood.apply(latent[k]) + sd * eps);
    }
    let obs = Observations::new(times, values)?;

    io::ensure_dir(&cfg.out_dir)?;
    let mut truth = Table::new(&["t", "u", "f"]);
    for (t, u) in grid.iter().zip(&latent) {
        truth.push([*t, *u, cfg.likelihood.apply(*u)]);
    }
    truth.write(&cfg.out_dir.join(TRUTH_FILE))?;
    io::write_observations(&cfg.out_dir.join(OBSERVATIONS_FILE), &obs)?;
    Ok(Simulation { grid, latent, obs })
}

/// Exact posterior on the merged grid with a 95% band.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFit {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Batch GP regression (or Kalman/RTS smoothing) at the configured
/// hyperparameters. Only defined for the identity likelihood.
pub fn fit_exact(cfg: &ExperimentConfig, obs: &Observations, kalman: bool) -> Result<ExactFit, CliError> {
    if cfg.likelihood != Likelihood::Identity {
        return Err(Error::Unsupported(format!(
            "exact GP regression needs the identity likelihood, config has likelihood = {}",
            cfg.likelihood
        ))
        .into());
    }
    let grid = cfg.grid(obs)?;
    let hp = cfg.hyperparams();
    let fit = if kalman {
        let ssm = build_ssm(cfg.kernel, &hp)?;
        let res = kalman_smooth(&ssm, obs, grid.points(), cfg.sigma2_y)?;
        ExactFit {
            grid: grid.points().to_vec(),
            mean: res.mean(),
            variance: res.variance(),
        }
    } else {
        let post = gp_regress(cfg.kernel, &hp, obs, grid.points())?;
        ExactFit {
            grid: grid.points().to_vec(),
            mean: post.mean.iter().copied().collect(),
            variance: post.variances(),
        }
    };
    io::ensure_dir(&cfg.out_dir)?;
    let mut t = Table::new(&["t", "mean", "lower", "upper"]);
    for ((tk, m), v) in fit.grid.iter().zip(&fit.mean).zip(&fit.variance) {
        let half = 1.96 * v.max(0.0).sqrt();
        t.push([*tk, *m, m - half, m + half]);
    }
    t.write(&cfg.out_dir.join(POSTERIOR_FILE))?;
    Ok(fit)
}

pub fn problem(cfg: &ExperimentConfig, obs: &Observations) -> Result<ElboProblem, CliError> {
    let mut p = ElboProblem::new(cfg.kernel, obs.clone(), cfg.grid(obs)?, cfg.likelihood, cfg.sigma2_y)?;
    p.prior = cfg.prior();
    Ok(p)
}

/// Variational paths for `params`, drawn with the config's path seed.
pub fn variational_paths(
    cfg: &ExperimentConfig,
    problem: &ElboProblem,
    params: &VariationalParams,
) -> Result<PathBundle, CliError> {
    Ok(generate_paths(
        params,
        problem,
        cfg.n_paths,
        rng::derive(cfg.seed, TAG_PATHS),
    )?)
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    /// Every checkpoint emitted during the run, in epoch order.
    pub checkpoints: Vec<Checkpoint>,
    pub paths: PathBundle,
}

/// Trains (or resumes from `from`) and writes checkpoints, the ELBO trace,
/// the path bundle and, for the square likelihood, a summary of `f = u²`.
pub fn train_vb(
    cfg: &ExperimentConfig,
    obs: &Observations,
    from: Option<Checkpoint>,
) -> Result<TrainArtifacts, CliError> {
    let problem = problem(cfg, obs)?;
    let start = match from {
        Some(ckpt) => ckpt,
        None => {
            let params = VariationalParams::init(cfg.kernel, cfg.hidden_size, rng::derive(cfg.seed, TAG_INIT))?;
            Checkpoint {
                epoch: 0,
                seed: rng::derive(cfg.seed, TAG_TRAIN),
                adam: Adam::new(params.n_params()),
                params,
            }
        }
    };
    let first_epoch = start.epoch;
    let ckpt_dir = cfg.out_dir.join(CHECKPOINT_DIR);
    io::ensure_dir(&ckpt_dir)?;

    let mut checkpoints = Vec::new();
    let mut last_written: Option<PathBuf> = None;
    let mut write_error = None;
    let result = resume(&problem, &cfg.train_config(), start, |ckpt| {
        let path = io::checkpoint_path(&ckpt_dir, ckpt.epoch);
        if let Err(e) = io::write_checkpoint(&path, ckpt) {
            let msg = e.to_string();
            write_error = Some(e);
            return Err(Error::Checkpoint(msg));
        }
        last_written = Some(path);
        checkpoints.push(ckpt.clone());
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Diverged { epoch, .. }) => {
            let at = match &last_written {
                Some(p) => format!("last checkpoint: {}", p.display()),
                None => "no checkpoint was written".to_string(),
            };
            return Err(CliError::Numerical(format!(
                "training diverged at epoch {epoch}: non-finite loss for 3 consecutive epochs; {at}"
            )));
        }
        Err(e) => return Err(write_error.unwrap_or_else(|| e.into())),
    };

    io::write_checkpoint(&cfg.out_dir.join(FINAL_CHECKPOINT), &outcome.last)?;
    let mut trace = Table::new(&["epoch", "elbo"]);
    for (i, v) in outcome.trace.iter().enumerate() {
        trace.push([(first_epoch + i + 1).to_string(), v.to_string()]);
    }
    trace.write(&cfg.out_dir.join(TRACE_FILE))?;

    let paths = variational_paths(cfg, &problem, &outcome.params)?;
    io::write_paths(&cfg.out_dir.join(PATHS_FILE), &paths)?;
    if cfg.likelihood == Likelihood::Square {
        write_square_summary(&cfg.out_dir.join(SUMMARY_FILE), &paths)?;
    }
    Ok(TrainArtifacts {
        outcome,
        checkpoints,
        paths,
    })
}

/// Pointwise mean and 2.5% / 97.5% quantiles of `f = u²` across paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareSummary {
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn square_summary(paths: &PathBundle) -> SquareSummary {
    let times = paths.grid().points();
    let mut s = SquareSummary {
        t: times.to_vec(),
        mean: Vec::with_capacity(times.len()),
        lower: Vec::with_capacity(times.len()),
        upper: Vec::with_capacity(times.len()),
    };
    for k in 0..times.len() {
        let mut f: Vec<f64> = (0..paths.n_paths()).map(|i| paths.value(i, k, 0).powi(2)).collect();
        s.mean.push(f.iter().sum::<f64>() / f.len() as f64);
        f.sort_by(f64::total_cmp);
        s.lower.push(io::quantile(&f, 0.025));
        s.upper.push(io::quantile(&f, 0.975));
    }
    s
}

fn write_square_summary(path: &Path, paths: &PathBundle) -> Result<(), CliError> {
    let s = square_summary(paths);
    let mut t = Table::new(&["t", "mean", "lower", "upper"]);
    for k in 0..s.t.len() {
        t.push([s.t[k], s.mean[k], s.lower[k], s.upper[k]]);
    }
    t.write(path)
}

/// Where the variational side of a two-sample test comes from.
#[derive(Debug, Clone)]
pub enum PathSource {
    File(PathBuf),
    Checkpoint(PathBuf),
    /// Replace the paths by an independent draw from the reference GP.
    SelfTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Criticism {
    pub report: MmdReport,
    pub alpha: f64,
    pub reference: KernelHyperparams,
}

/// Hyperparameters of the reference GP.
pub fn reference_hyperparams(cfg: &ExperimentConfig, obs: &Observations) -> Result<KernelHyperparams, CliError> {
    Ok(match cfg.reference {
        Reference::True => cfg.hyperparams(),
        Reference::Fitted => fit_hyperparams(cfg.kernel, obs, cfg.sigma2_y, &cfg.prior())?,
    })
}

/// Two-sample MMD test between `paths` (one vector per path on `times`) and
/// GP posterior samples on the same grid.
pub fn criticize_paths(
    cfg: &ExperimentConfig,
    obs: &Observations,
    times: &[f64],
    paths: Option<&[Vec<f64>]>,
) -> Result<Criticism, CliError> {
    if cfg.likelihood != Likelihood::Identity {
        return Err(Error::Unsupported(format!(
            "criticism compares against exact GP regression, which needs likelihood = identity (config has {})",
            cfg.likelihood
        ))
        .into());
    }
    let grid = cfg.grid(obs)?;
    if times.len() != grid.len() || times.iter().zip(grid.points()).any(|(a, b)| (a - b).abs() > GRID_TOL) {
        return Err(CliError::Config(format!(
            "grid mismatch: paths have {} time points, the config grid has {} (t_start, t_end, grid_steps, n_obs)",
            times.len(),
            grid.len()
        )));
    }
    let reference = reference_hyperparams(cfg, obs)?;
    let post = gp_regress(cfg.kernel, &reference, obs, grid.points())?;
    let samples = gp_sample(&post, cfg.n_gp_samples, rng::derive(cfg.seed, TAG_REFERENCE))?.projected_all();
    let substitute;
    let paths = match paths {
        Some(p) => p,
        None => {
            substitute = gp_sample(&post, cfg.n_gp_samples, rng::derive(cfg.seed, TAG_SELF_TEST))?.projected_all();
            &substitute
        }
    };
    if paths.len() != samples.len() {
        return Err(CliError::Config(format!(
            "n_gp_samples: {} GP samples cannot be compared with {} paths; the test needs equal sizes",
            samples.len(),
            paths.len()
        )));
    }
    let report = mmd_test(
        paths,
        &samples,
        cfg.n_permutations,
        cfg.alpha,
        rng::derive(cfg.seed, TAG_PERMUTATION),
    )?;
    Ok(Criticism {
        report,
        alpha: cfg.alpha,
        reference,
    })
}

fn report_table(c: &Criticism) -> Table {
    let mut t = Table::new(&[
        "mmd2",
        "threshold",
        "reject",
        "bandwidth",
        "m",
        "n_permutations",
        "alpha",
        "seed",
        "reference_lambda",
        "reference_sigma2_k",
    ]);
    let r = &c.report;
    t.push([
        r.mmd2.to_string(),
        r.threshold.to_string(),
        r.reject.to_string(),
        r.bandwidth.to_string(),
        r.m.to_string(),
        r.n_permutations.to_string(),
        c.alpha.to_string(),
        r.seed.to_string(),
        c.reference.lambda.to_string(),
        c.reference.sigma2_k.to_string(),
    ]);
    t
}

pub fn criticize(cfg: &ExperimentConfig, obs: &Observations, source: &PathSource) -> Result<Criticism, CliError> {
    let c = match source {
        PathSource::File(p) => {
            let table = io::read_paths(p)?;
            criticize_paths(cfg, obs, &table.times, Some(&table.paths))?
        }
        PathSource::Checkpoint(p) => {
            let ckpt = io::read_checkpoint(p)?;
            let problem = problem(cfg, obs)?;
            let bundle = variational_paths(cfg, &problem, &ckpt.params)?;
            criticize_paths(cfg, obs, problem.grid.points(), Some(&bundle.projected_all()))?
        }
        PathSource::SelfTest => {
            let grid = cfg.grid(obs)?;
            criticize_paths(cfg, obs, grid.points(), None)?
        }
    };
    io::ensure_dir(&cfg.out_dir)?;
    report_table(&c).write(&cfg.out_dir.join(REPORT_FILE))?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    ExpGp,
    CriticizeSweep,
    Nonlinear,
}

impl Experiment {
    pub fn base_config(self) -> ExperimentConfig {
        match self {
            Experiment::Nonlinear => ExperimentConfig::nonlinear(),
            _ => ExperimentConfig::default(),
        }
    }
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epoch: usize,
    pub criticism: Criticism,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub simulation: Simulation,
    pub training: TrainArtifacts,
    pub exact: Option<ExactFit>,
    pub criticism: Option<Criticism>,
    pub sweep: Vec<SweepRow>,
}

/// Runs a whole study into `cfg.out_dir`.
pub fn experiment(which: Experiment, cfg: &ExperimentConfig) -> Result<ExperimentOutput, CliError> {
    if which == Experiment::Nonlinear && cfg.likelihood != Likelihood::Square {
        return Err(CliError::Config(
            "likelihood: the nonlinear experiment needs likelihood = square".into(),
        ));
    }
    if which != Experiment::Nonlinear && cfg.likelihood != Likelihood::Identity {
        return Err(CliError::Config(
            "likelihood: this experiment compares against exact GP regression and needs likelihood = identity".into(),
        ));
    }
    let simulation = simulate(cfg)?;
    let obs = &simulation.obs;
    let mut out = ExperimentOutput {
        exact: None,
        criticism: None,
        sweep: Vec::new(),
        training: train_vb(cfg, obs, None)?,
        simulation: simulation.clone(),
    };
    match which {
        Experiment::ExpGp => {
            out.exact = Some(fit_exact(cfg, obs, false)?);
            let grid = out.training.paths.grid().points().to_vec();
            let c = criticize_paths(cfg, obs, &grid, Some(&out.training.paths.projected_all()))?;
            report_table(&c).write(&cfg.out_dir.join(REPORT_FILE))?;
            out.criticism = Some(c);
        }
        Experiment::CriticizeSweep => {
            let problem = problem(cfg, obs)?;
            let mut table = Table::new(&["epoch", "mmd2", "threshold", "reject"]);
            for &epoch in &cfg.milestones {
                let Some(ckpt) = out.training.checkpoints.iter().find(|c| c.epoch == epoch) else {
                    continue;
                };
                let bundle = variational_paths(cfg, &problem, &ckpt.params)?;
                let c = criticize_paths(cfg, obs, problem.grid.points(), Some(&bundle.projected_all()))?;
                table.push([
                    epoch.to_string(),
                    c.report.mmd2.to_string(),
                    c.report.threshold.to_string(),
                    c.report.reject.to_string(),
                ]);
                out.sweep.push(SweepRow { epoch, criticism: c });
            }
            table.write(&cfg.out_dir.join(SWEEP_FILE))?;
        }
        Experiment::Nonlinear => {}
    }
    Ok(out)
}
