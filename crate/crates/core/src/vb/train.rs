use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::rng;

use super::elbo::elbo_and_gradient;
use super::{BridgeRnn, ElboProblem, MeanFieldGaussian, VariationalParams};

const CHECKPOINT_MAGIC: &str = "vbgp-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Monte Carlo samples per ELBO estimate.
    pub n_samples: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Emit a checkpoint every this many epochs; `0` disables.
    pub checkpoint_every: usize,
    /// Additional epochs after which a checkpoint is emitted.
    pub milestones: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_samples: 10,
            clip_norm: 10.0,
            checkpoint_every: 500,
            milestones: Vec::new(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return invalid(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("Adam moment decays must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return invalid("Adam epsilon must be positive");
        }
        if self.n_samples == 0 {
            return invalid("need at least one Monte Carlo sample per step");
        }
        if !(self.clip_norm >= 0.0) {
            return invalid("clip norm must be >= 0");
        }
        Ok(())
    }

    fn wants_checkpoint(&self, epoch: usize) -> bool {
        (self.checkpoint_every > 0 && epoch.is_multiple_of(self.checkpoint_every)) || self.milestones.contains(&epoch)
    }
}

/// Adaptive-moment ascent state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], config: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = config.beta1 * self.m[i] + (1.0 - config.beta1) * grad[i];
            self.v[i] = config.beta2 * self.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Epochs completed.
    pub epoch: usize,
    /// Training seed; epoch `e` draws from `rng::derive(seed, e)`.
    pub seed: u64,
    pub params: VariationalParams,
    pub adam: Adam,
}

fn write_vec(out: &mut String, key: &str, values: &[f64]) {
    let _ = write!(out, "{key} {}", values.len());
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

impl Checkpoint {
    /// Versioned line-oriented text: one `key value...` record per line,
    /// vectors as `key len v1 v2 ...` with round-trip float formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "epoch {}", self.epoch);
        let _ = writeln!(out, "rng_stream {} {}", self.seed, self.epoch);
        let _ = writeln!(out, "hidden_size {}", self.params.rnn.hidden_size());
        let _ = writeln!(out, "state_dim {}", self.params.rnn.state_dim());
        let _ = writeln!(out, "adam_t {}", self.adam.t);
        write_vec(&mut out, "theta.mu", &self.params.theta_dist.mu);
        write_vec(&mut out, "theta.log_s", &self.params.theta_dist.log_s);
        write_vec(&mut out, "rnn.weights", self.params.rnn.weights());
        write_vec(&mut out, "adam.m", &self.adam.m);
        write_vec(&mut out, "adam.v", &self.adam.v);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(format!("not a checkpoint: `{header}`")));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing format version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }

        let mut fields: std::collections::HashMap<String, Vec<String>> = Default::default();
        for line in lines {
            let mut parts = line.split_whitespace();
            let key = parts.next().expect("non-empty line").to_string();
            if fields
                .insert(key.clone(), parts.map(str::to_string).collect())
                .is_some()
            {
                return Err(bad(format!("duplicate key `{key}`")));
            }
        }
        let scalar = |key: &str| -> Result<u64> {
            fields
                .get(key)
                .and_then(|v| v.first())
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or malformed `{key}`")))
        };
        let vector = |key: &str| -> Result<Vec<f64>> {
            let raw = fields.get(key).ok_or_else(|| bad(format!("missing `{key}`")))?;
            let (len, vals) = raw.split_first().ok_or_else(|| bad(format!("`{key}` has no length")))?;
            let len: usize = len
                .parse()
                .map_err(|_| bad(format!("`{key}` length is not a number")))?;
            if vals.len() != len {
                return Err(bad(format!("`{key}` declares {len} values, found {}", vals.len())));
            }
            vals.iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("`{key}` has bad value `{v}`")))
                })
                .collect()
        };

        let epoch = scalar("epoch")? as usize;
        let stream = fields
            .get("rng_stream")
            .ok_or_else(|| bad("missing `rng_stream`".into()))?;
        let seed: u64 = stream
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("malformed `rng_stream`".into()))?;
        if stream.get(1).and_then(|v| v.parse::<usize>().ok()) != Some(epoch) {
            return Err(bad("`rng_stream` position does not match `epoch`".into()));
        }
        let hidden = scalar("hidden_size")? as usize;
        let dim = scalar("state_dim")? as usize;
        let theta =
            MeanFieldGaussian::new(vector("theta.mu")?, vector("theta.log_s")?).map_err(|e| bad(e.to_string()))?;
        let rnn = BridgeRnn::from_weights(hidden, dim, vector("rnn.weights")?).map_err(|e| bad(e.to_string()))?;
        let params = VariationalParams::new(theta, rnn).map_err(|e| bad(e.to_string()))?;
        let adam = Adam {
            m: vector("adam.m")?,
            v: vector("adam.v")?,
            t: scalar("adam_t")?,
        };
        if adam.m.len() != params.n_params() || adam.v.len() != params.n_params() {
            return Err(bad("optimizer state length does not match parameters".into()));
        }
        Ok(Checkpoint {
            epoch,
            seed,
            params,
            adam,
        })
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: VariationalParams,
    /// ELBO estimate at each epoch, evaluated before that epoch's update.
    pub trace: Vec<f64>,
    /// State after the final epoch.
    pub last: Checkpoint,
}

/// Maximizes the ELBO from `init` for `config.epochs` epochs.
///
/// `on_checkpoint` sees the state after every epoch selected by the config.
pub fn train<F>(
    problem: &ElboProblem,
    config: &TrainConfig,
    init: VariationalParams,
    seed: u64,
    on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    let adam = Adam::new(init.n_params());
    let start = Checkpoint {
        epoch: 0,
        seed,
        params: init,
        adam,
    };
    resume(problem, config, start, on_checkpoint)
}

/// Continues training from a checkpoint up to `config.epochs` total epochs.
pub fn resume<F>(
    problem: &ElboProblem,
    config: &TrainConfig,
    from: Checkpoint,
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    config.validate()?;
    if from.epoch > config.epochs {
        return invalid(format!(
            "checkpoint is at epoch {} but only {} epochs are configured",
            from.epoch, config.epochs
        ));
    }
    let Checkpoint {
        epoch: start,
        seed,
        mut params,
        mut adam,
    } = from;
    let mut flat = params.to_flat();
    let mut trace = Vec::with_capacity(config.epochs - start);
    let mut bad_epochs = 0;
    let mut last_checkpoint: Option<Checkpoint> = None;

    for epoch in start..config.epochs {
        let step_seed = rng::derive(seed, epoch as u64);
        let outcome = elbo_and_gradient(&params, problem, config.n_samples, step_seed);
        let (value, grad) = match outcome {
            Ok((est, grad)) if est.value.is_finite() && grad.iter().all(|g| g.is_finite()) => (est.value, Some(grad)),
            Ok((est, _)) => (est.value, None),
            Err(Error::Numerical(_)) => (f64::NAN, None),
            Err(e) => return Err(e),
        };
        trace.push(value);
        match grad {
            Some(mut grad) => {
                bad_epochs = 0;
                clip(&mut grad, config.clip_norm);
                adam.step(&mut flat, &grad, config);
                params.set_flat(&flat)?;
            }
            None => {
                bad_epochs += 1;
                if bad_epochs >= 3 {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        last_checkpoint: last_checkpoint.map(Box::new),
                    });
                }
            }
        }
        let done = epoch + 1;
        if config.wants_checkpoint(done) {
            let ckpt = Checkpoint {
                epoch: done,
                seed,
                params: params.clone(),
                adam: adam.clone(),
            };
            on_checkpoint(&ckpt)?;
            last_checkpoint = Some(ckpt);
        }
    }
    let last = Checkpoint {
        epoch: config.epochs,
        seed,
        params: params.clone(),
        adam,
    };
    Ok(TrainOutcome { params, trace, last })
}
