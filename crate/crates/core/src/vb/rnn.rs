use rand::Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::autodiff::{gaussian_log_pdf, DualTensor, Gradients, Tape};
use crate::error::{invalid, Error, Result};
use crate::gp::{KernelHyperparams, Observations};
use crate::rng;
use crate::sde::TimeGrid;

/// Lower bound added to the diffusion head after the softplus.
pub const DIFFUSION_FLOOR: f64 = 1e-6;

/// Per-step inputs besides the state: normalized time, step length,
/// time to the next observation, its value, and whether the last
/// observation has been passed.
const N_BRIDGE_FEATURES: usize = 5;

/// Offsets of the weight blocks inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    hidden: usize,
    input: usize,
    dim: usize,
}

impl Layout {
    fn new(hidden: usize, dim: usize) -> Self {
        Layout {
            hidden,
            input: dim + N_BRIDGE_FEATURES + super::N_THETA,
            dim,
        }
    }

    /// `(rows, cols)` of each block in storage order: input→gates (z, r),
    /// input→candidate, hidden→gates, hidden→candidate, gate bias,
    /// candidate bias, drift head, drift bias, diffusion head, diffusion
    /// bias, initial-state mean, initial-state log std.
    fn blocks(&self) -> [(usize, usize); 12] {
        let (h, d, m) = (self.hidden, self.input, self.dim);
        [
            (d, 2 * h),
            (d, h),
            (h, 2 * h),
            (h, h),
            (1, 2 * h),
            (1, h),
            (h + d, m),
            (1, m),
            (h + d, m),
            (1, m),
            (1, m),
            (1, m),
        ]
    }

    fn count(&self) -> usize {
        self.blocks().iter().map(|(r, c)| r * c).sum()
    }
}

/// Gated recurrent cell with a drift head and a diffusion head.
///
/// The cell input at step `k` is `[f_k, t_k normalized, Δt_k, time to next
/// observation, next observed value, last-observation-passed flag, log λ,
/// log σ²_k]`. Both heads read the new hidden state concatenated with that
/// input. The diffusion is `softplus(·) + DIFFUSION_FLOOR`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeRnn {
    layout: Layout,
    weights: Vec<f64>,
}

impl BridgeRnn {
    /// Recurrent weights uniform in `±1/√fan_in`; biases, both output heads
    /// and the initial-state parameters zero, so the untrained bridge is a
    /// driftless random walk started from `N(0, 1)`.
    pub fn new(hidden_size: usize, state_dim: usize, seed: u64) -> Result<Self> {
        if hidden_size == 0 || state_dim == 0 {
            return invalid("hidden size and state dimension must be >= 1");
        }
        let layout = Layout::new(hidden_size, state_dim);
        let mut rng = rng::stream(seed, u64::MAX);
        let mut weights = Vec::with_capacity(layout.count());
        for (i, (rows, cols)) in layout.blocks().into_iter().enumerate() {
            if i < 4 {
                let bound = 1.0 / (rows as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                weights.extend((0..rows * cols).map(|_| rng.sample(dist)));
            } else {
                weights.extend(std::iter::repeat_n(0.0, rows * cols));
            }
        }
        debug_assert_eq!(weights.len(), layout.count());
        Ok(BridgeRnn { layout, weights })
    }

    pub fn from_weights(hidden_size: usize, state_dim: usize, weights: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(hidden_size, state_dim);
        if weights.len() != layout.count() {
            return invalid(format!(
                "bridge network with hidden size {hidden_size} and state dim {state_dim} needs {} weights, got {}",
                layout.count(),
                weights.len()
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return invalid("bridge network weights must be finite");
        }
        Ok(BridgeRnn { layout, weights })
    }

    /// Parameter count for a given shape.
    pub fn param_count(hidden_size: usize, state_dim: usize) -> usize {
        Layout::new(hidden_size, state_dim).count()
    }

    pub fn hidden_size(&self) -> usize {
        self.layout.hidden
    }

    pub fn state_dim(&self) -> usize {
        self.layout.dim
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Zeroes both output heads and their biases.
    pub fn zero_heads(&mut self) {
        let blocks = self.layout.blocks();
        let mut offset = 0;
        for (i, (r, c)) in blocks.into_iter().enumerate() {
            if (6..10).contains(&i) {
                self.weights[offset..offset + r * c].fill(0.0);
            }
            offset += r * c;
        }
    }

    pub(crate) fn leaves<'t>(&self, tape: &'t Tape, as_params: bool) -> RnnLeaves<'t> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(12);
        for (rows, cols) in self.layout.blocks() {
            let data = self.weights[offset..offset + rows * cols].to_vec();
            offset += rows * cols;
            out.push(if as_params {
                tape.parameter(rows, cols, data)
            } else {
                tape.constant(rows, cols, data)
            });
        }
        RnnLeaves {
            blocks: out.try_into().expect("12 blocks"),
            hidden: self.layout.hidden,
        }
    }
}

impl BridgeRnn {
    /// One cell step at input `x` and hidden state `h`, reduced to the scalar
    /// `probe · [h', g̃, c̃]`. Returns the scalar and its gradient w.r.t. the
    /// flat weights followed by `x` and `h`.
    pub fn cell_probe(&self, x: &[f64], h: &[f64], probe: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (hs, m) = (self.hidden_size(), self.state_dim());
        if x.len() != self.input_dim() || h.len() != hs || probe.len() != hs + 2 * m {
            return invalid(format!(
                "cell probe expects x of length {}, h of length {hs} and probe of length {}",
                self.input_dim(),
                hs + 2 * m
            ));
        }
        let tape = Tape::new();
        let leaves = self.leaves(&tape, true);
        let xt = tape.parameter(1, x.len(), x.to_vec());
        let ht = tape.parameter(1, hs, h.to_vec());
        let (h_next, drift, diffusion) = leaves.step(xt, ht)?;
        let out = tape.concat(&[h_next, drift, diffusion])?;
        let value = (out * tape.row(probe.to_vec())).sum();
        if let Some(fault) = tape.fault() {
            return Err(Error::Numerical(fault));
        }
        let grads = tape.backward(value)?;
        let mut g = leaves.gradient(&grads);
        g.extend(grads.get_or_zero(xt));
        g.extend(grads.get_or_zero(ht));
        Ok((value.item(), g))
    }
}

pub(crate) struct RnnLeaves<'t> {
    blocks: [DualTensor<'t>; 12],
    hidden: usize,
}

impl<'t> RnnLeaves<'t> {
    /// Flat gradient in storage order.
    pub fn gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| grads.get_or_zero(*b)).collect()
    }

    fn step(&self, x: DualTensor<'t>, h: DualTensor<'t>) -> Result<(DualTensor<'t>, DualTensor<'t>, DualTensor<'t>)> {
        let [w_zr, w_n, u_zr, u_n, b_zr, b_n, w_g, b_g, w_c, b_c, _, _] = self.blocks;
        let hs = self.hidden;
        let zr = (x.matmul(w_zr)? + h.matmul(u_zr)? + b_zr).sigmoid();
        let z = zr.slice(0, hs)?;
        let r = zr.slice(hs, hs)?;
        let n = (x.matmul(w_n)? + (r * h).matmul(u_n)? + b_n).tanh();
        let h_next = n + z * (h - n);
        let hx = x.tape().concat(&[h_next, x])?;
        let drift = hx.matmul(w_g)? + b_g;
        let diffusion = (hx.matmul(w_c)? + b_c).softplus() + DIFFUSION_FLOOR;
        Ok((h_next, drift, diffusion))
    }

    fn init(&self) -> (DualTensor<'t>, DualTensor<'t>) {
        (self.blocks[10], self.blocks[11])
    }
}

/// Constant per-step cell inputs derived from the grid and observations.
#[derive(Debug, Clone)]
pub(crate) struct BridgeFeatures {
    rows: Vec<[f64; N_BRIDGE_FEATURES]>,
}

impl BridgeFeatures {
    pub fn new(grid: &TimeGrid, obs: &Observations) -> Self {
        let (t0, span) = (grid.start(), (grid.end() - grid.start()).max(f64::MIN_POSITIVE));
        let times = obs.times();
        let rows = (0..grid.steps())
            .map(|k| {
                let t = grid.points()[k];
                // next observation strictly after t_k
                let next = times.partition_point(|&tau| tau <= t);
                let (ttn, y_next, passed) = match times.get(next) {
                    Some(&tau) => (tau - t, obs.values()[next], 0.0),
                    None => (0.0, 0.0, 1.0),
                };
                [(t - t0) / span, grid.dt(k), ttn, y_next, passed]
            })
            .collect();
        BridgeFeatures { rows }
    }
}

/// Standard-normal draws driving one rollout.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BridgeNoise {
    pub init: Vec<f64>,
    pub steps: Vec<f64>,
}

impl BridgeNoise {
    pub fn draw<R: Rng>(rng: &mut R, dim: usize, steps: usize) -> Self {
        let init = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let steps = (0..steps * dim).map(|_| rng.sample(StandardNormal)).collect();
        BridgeNoise { init, steps }
    }
}

/// A rollout recorded on a tape.
pub(crate) struct RolloutNodes<'t> {
    pub states: Vec<DualTensor<'t>>,
    pub log_q: DualTensor<'t>,
    pub drifts: Vec<f64>,
    pub diffusions: Vec<f64>,
}

/// Generates a bridge path on `tape`. `log_theta` is the 1x2 row
/// `[log λ, log σ²_k]` fed to the cell.
pub(crate) fn rollout_on_tape<'t>(
    leaves: &RnnLeaves<'t>,
    tape: &'t Tape,
    log_theta: DualTensor<'t>,
    features: &BridgeFeatures,
    grid: &TimeGrid,
    noise: &BridgeNoise,
) -> Result<RolloutNodes<'t>> {
    let m = noise.init.len();
    let (init_mean, init_log_std) = leaves.init();
    let init_std = init_log_std.exp();
    let f0 = init_mean + init_std * tape.row(noise.init.clone());
    let log_q0 = gaussian_log_pdf(f0, init_mean, init_std.square())?;

    let steps = grid.steps();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(f0);
    let mut increments = Vec::with_capacity(steps);
    let mut means = Vec::with_capacity(steps);
    let mut vars = Vec::with_capacity(steps);
    let mut drifts = Vec::with_capacity(steps * m);
    let mut diffusions = Vec::with_capacity(steps * m);
    let mut h = tape.constant(1, leaves.hidden, vec![0.0; leaves.hidden]);
    let mut f = f0;
    for k in 0..steps {
        let dt = grid.dt(k);
        let x = tape.concat(&[f, tape.row(features.rows[k].to_vec()), log_theta])?;
        let (h_next, drift, diffusion) = leaves.step(x, h)?;
        let eps = tape.row(noise.steps[k * m..(k + 1) * m].to_vec());
        let mean = drift * dt;
        let incr = mean + diffusion * eps * dt.sqrt();
        let next = f + incr;
        {
            let (g, c, v) = (drift.values(), diffusion.values(), next.values());
            if g.iter().chain(c.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite bridge activation at step {k}")));
            }
            drifts.extend(g.iter());
            diffusions.extend(c.iter());
        }
        increments.push(incr);
        means.push(mean);
        vars.push(diffusion.square() * dt);
        states.push(next);
        f = next;
        h = h_next;
    }
    let log_q = if steps == 0 {
        log_q0
    } else {
        log_q0 + gaussian_log_pdf(tape.concat(&increments)?, tape.concat(&means)?, tape.concat(&vars)?)?
    };
    Ok(RolloutNodes {
        states,
        log_q,
        drifts,
        diffusions,
    })
}

/// One sampled bridge path with its log density under the variational
/// path distribution, plus the drift and diffusion sequences the cell
/// emitted (`T x m` each, step-major).
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeRollout {
    /// `(T + 1) x m` states, time-major.
    pub path: Vec<f64>,
    pub log_q_path: f64,
    pub drifts: Vec<f64>,
    pub diffusions: Vec<f64>,
    pub init_mean: Vec<f64>,
    pub init_std: Vec<f64>,
}

/// Samples a bridge path for fixed hyperparameters. Noise comes from ChaCha
/// stream 0 of `seed`.
pub fn rollout_bridge(
    rnn: &BridgeRnn,
    theta: &KernelHyperparams,
    obs: &Observations,
    grid: &TimeGrid,
    seed: u64,
) -> Result<BridgeRollout> {
    theta.validate()?;
    let grid = grid.clone().attach(obs)?;
    let features = BridgeFeatures::new(&grid, obs);
    let noise = BridgeNoise::draw(&mut rng::stream(seed, 0), rnn.state_dim(), grid.steps());
    let tape = Tape::new();
    let leaves = rnn.leaves(&tape, false);
    let log_theta = tape.row(vec![theta.lambda.ln(), theta.sigma2_k.ln()]);
    let nodes = rollout_on_tape(&leaves, &tape, log_theta, &features, &grid, &noise)?;
    let (init_mean, init_log_std) = leaves.init();
    let path: Vec<f64> = nodes.states.iter().flat_map(|s| s.values().to_vec()).collect();
    let init_mean: Vec<f64> = init_mean.values().to_vec();
    let init_std: Vec<f64> = init_log_std.values().iter().map(|v| v.exp()).collect();
    let log_q_path = nodes.log_q.item();
    Ok(BridgeRollout {
        path,
        log_q_path,
        drifts: nodes.drifts,
        diffusions: nodes.diffusions,
        init_mean,
        init_std,
    })
}
