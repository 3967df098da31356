//! Experiment configuration: a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use vbgp_core::vb::{Likelihood, TrainConfig};
use vbgp_core::{KernelHyperparams, KernelKind, LogNormalPrior, Observations, TimeGrid};

use crate::CliError;

/// Hyperparameters used for the reference GP in criticism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// Type-II MAP fit to the observations under the inference prior.
    Fitted,
    /// The data-generating values from the config.
    True,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kernel: KernelKind,
    pub lambda: f64,
    pub sigma2_k: f64,
    pub sigma2_y: f64,
    pub n_obs: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub grid_steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub clip_norm: f64,
    pub hidden_size: usize,
    pub checkpoint_every: usize,
    pub milestones: Vec<usize>,
    pub likelihood: Likelihood,
    pub prior_log_mean: f64,
    pub prior_log_std: f64,
    pub n_paths: usize,
    pub n_gp_samples: usize,
    pub n_permutations: usize,
    pub alpha: f64,
    pub reference: Reference,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kernel: KernelKind::Exponential,
            lambda: 1.0,
            sigma2_k: 1.0,
            sigma2_y: 0.1,
            n_obs: 6,
            t_start: 0.0,
            t_end: 10.0,
            grid_steps: 64,
            epochs: 2500,
            learning_rate: 1e-3,
            mc_samples: 10,
            clip_norm: 10.0,
            hidden_size: 50,
            checkpoint_every: 500,
            milestones: vec![10, 100, 500, 1000, 2500],
            likelihood: Likelihood::Identity,
            prior_log_mean: 0.0,
            prior_log_std: 1.0,
            n_paths: 30,
            n_gp_samples: 30,
            n_permutations: 1000,
            alpha: 0.05,
            reference: Reference::Fitted,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "kernel",
    "lambda",
    "sigma2_k",
    "sigma2_y",
    "n_obs",
    "t_start",
    "t_end",
    "grid_steps",
    "epochs",
    "learning_rate",
    "mc_samples",
    "clip_norm",
    "hidden_size",
    "checkpoint_every",
    "milestones",
    "likelihood",
    "prior_log_mean",
    "prior_log_std",
    "n_paths",
    "n_gp_samples",
    "n_permutations",
    "alpha",
    "reference",
    "seed",
    "out_dir",
];

fn field_error(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| field_error(key, format!("cannot parse {value:?}: {e}")))
}

impl ExperimentConfig {
    /// Defaults for the non-linear likelihood study.
    pub fn nonlinear() -> Self {
        ExperimentConfig {
            likelihood: Likelihood::Square,
            t_start: 18.0,
            t_end: 30.0,
            n_obs: 12,
            ..Default::default()
        }
    }

    /// Parses `text` on top of `base`, then validates.
    pub fn parse_onto(base: ExperimentConfig, text: &str) -> Result<Self, CliError> {
        let mut cfg = base;
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if seen.iter().any(|k| k == key) {
                return Err(field_error(key, "given more than once"));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        Self::parse_onto(ExperimentConfig::default(), text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "kernel" => self.kernel = value.parse().map_err(|e| field_error(key, e))?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "sigma2_k" => self.sigma2_k = parse_num(key, value)?,
            "sigma2_y" => self.sigma2_y = parse_num(key, value)?,
            "n_obs" => self.n_obs = parse_num(key, value)?,
            "t_start" => self.t_start = parse_num(key, value)?,
            "t_end" => self.t_end = parse_num(key, value)?,
            "grid_steps" => self.grid_steps = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "mc_samples" => self.mc_samples = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "hidden_size" => self.hidden_size = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "milestones" => {
                self.milestones = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse_num(key, v.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "likelihood" => self.likelihood = value.parse().map_err(|e| field_error(key, e))?,
            "prior_log_mean" => self.prior_log_mean = parse_num(key, value)?,
            "prior_log_std" => self.prior_log_std = parse_num(key, value)?,
            "n_paths" => self.n_paths = parse_num(key, value)?,
            "n_gp_samples" => self.n_gp_samples = parse_num(key, value)?,
            "n_permutations" => self.n_permutations = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "reference" => {
                self.reference = match value {
                    "fitted" => Reference::Fitted,
                    "true" => Reference::True,
                    _ => return Err(field_error(key, format!("expected `fitted` or `true`, got {value:?}"))),
                }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "out_dir" => {
                if value.is_empty() {
                    return Err(field_error(key, "must not be empty"));
                }
                self.out_dir = PathBuf::from(value)
            }
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    /// Checks every invariant; the message names the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(field_error(key, format!("must be positive and finite, got {v}")))
            }
        };
        let at_least = |key: &str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(field_error(key, format!("must be at least {min}, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        positive("sigma2_k", self.sigma2_k)?;
        positive("sigma2_y", self.sigma2_y)?;
        positive("prior_log_std", self.prior_log_std)?;
        if !self.t_start.is_finite() {
            return Err(field_error("t_start", "must be finite"));
        }
        if !(self.t_end.is_finite() && self.t_end > self.t_start) {
            return Err(field_error("t_end", format!("must exceed t_start = {}", self.t_start)));
        }
        if !self.prior_log_mean.is_finite() {
            return Err(field_error("prior_log_mean", "must be finite"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(field_error("learning_rate", "must be finite and >= 0"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(field_error("clip_norm", "must be finite and >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(field_error("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        at_least("n_obs", self.n_obs, 1)?;
        at_least("grid_steps", self.grid_steps, 1)?;
        at_least("mc_samples", self.mc_samples, 1)?;
        at_least("hidden_size", self.hidden_size, 1)?;
        at_least("n_paths", self.n_paths, 1)?;
        at_least("n_gp_samples", self.n_gp_samples, 1)?;
        at_least("n_permutations", self.n_permutations, 100)?;
        if self.milestones.contains(&0) {
            return Err(field_error("milestones", "epochs must be at least 1"));
        }
        Ok(())
    }

    /// Serializes every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let milestones: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        let reference = match self.reference {
            Reference::Fitted => "fitted",
            Reference::True => "true",
        };
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "sigma2_k = {}", self.sigma2_k);
        let _ = writeln!(s, "sigma2_y = {}", self.sigma2_y);
        let _ = writeln!(s, "n_obs = {}", self.n_obs);
        let _ = writeln!(s, "t_start = {}", self.t_start);
        let _ = writeln!(s, "t_end = {}", self.t_end);
        let _ = writeln!(s, "grid_steps = {}", self.grid_steps);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "mc_samples = {}", self.mc_samples);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "hidden_size = {}", self.hidden_size);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "milestones = {}", milestones.join(","));
        let _ = writeln!(s, "likelihood = {}", self.likelihood);
        let _ = writeln!(s, "prior_log_mean = {}", self.prior_log_mean);
        let _ = writeln!(s, "prior_log_std = {}", self.prior_log_std);
        let _ = writeln!(s, "n_paths = {}", self.n_paths);
        let _ = writeln!(s, "n_gp_samples = {}", self.n_gp_samples);
        let _ = writeln!(s, "n_permutations = {}", self.n_permutations);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "reference = {reference}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    pub fn hyperparams(&self) -> KernelHyperparams {
        KernelHyperparams {
            lambda: self.lambda,
            sigma2_k: self.sigma2_k,
            sigma2_y: self.sigma2_y,
        }
    }

    pub fn prior(&self) -> LogNormalPrior {
        LogNormalPrior {
            log_mean: self.prior_log_mean,
            log_std: self.prior_log_std,
        }
    }

    /// Observation times: midpoints of `n_obs` equal cells over the span.
    pub fn observation_times(&self) -> Vec<f64> {
        let width = (self.t_end - self.t_start) / self.n_obs as f64;
        (0..self.n_obs)
            .map(|j| self.t_start + (j as f64 + 0.5) * width)
            .collect()
    }

    /// Uniform grid over the span merged with the observation times.
    pub fn grid(&self, obs: &Observations) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::with_observations(
            self.t_start,
            self.t_end,
            self.grid_steps,
            obs,
        )?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            n_samples: self.mc_samples,
            clip_norm: self.clip_norm,
            checkpoint_every: self.checkpoint_every,
            milestones: self.milestones.clone(),
            ..TrainConfig::default()
        }
    }
}
