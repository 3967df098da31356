//! Variational Brownian bridges for GP regression.
//!
//! The posterior over the latent path is a discretized diffusion whose drift
//! and diffusion are emitted step by step by a gated recurrent network
//! ([`BridgeRnn`]); the kernel hyperparameters get a mean-field log-normal
//! family ([`MeanFieldGaussian`]). Both are fitted jointly by stochastic
//! gradient ascent on a reparameterized Monte Carlo ELBO.

mod elbo;
mod rnn;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{gaussian_log_pdf, DualTensor, Tape};
use crate::error::{invalid, Error, Result};
pub use crate::gp::LogNormalPrior;
use crate::gp::{KernelHyperparams, KernelKind, Observations};
use crate::rng;
use crate::sde::TimeGrid;

pub use elbo::{
    elbo, elbo_and_gradient, elbo_with_family, generate_paths, path_log_density_and_gradient, ElboEstimate, ElboTerms,
    PathFamily,
};
pub use rnn::{rollout_bridge, BridgeRnn, BridgeRollout, DIFFUSION_FLOOR};
pub use train::{resume, train, Adam, Checkpoint, TrainConfig, TrainOutcome};

/// Number of kernel hyperparameters inferred: `log λ` and `log σ²_k`.
pub const N_THETA: usize = 2;

/// Observation map `h` in `y = h(f) + ε`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Likelihood {
    #[default]
    Identity,
    /// `y = f² + ε`.
    Square,
}

impl Likelihood {
    pub fn apply(self, f: f64) -> f64 {
        match self {
            Likelihood::Identity => f,
            Likelihood::Square => f * f,
        }
    }

    fn apply_tape<'t>(self, f: DualTensor<'t>) -> DualTensor<'t> {
        match self {
            Likelihood::Identity => f,
            Likelihood::Square => f.square(),
        }
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Likelihood::Identity => "identity",
            Likelihood::Square => "square",
        })
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Likelihood::Identity),
            "square" => Ok(Likelihood::Square),
            other => invalid(format!("unknown likelihood `{other}` (expected identity or square)")),
        }
    }
}

/// Mean-field Gaussian over the unconstrained hyperparameters `η = log θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGaussian {
    pub mu: Vec<f64>,
    pub log_s: Vec<f64>,
}

impl MeanFieldGaussian {
    pub fn new(mu: Vec<f64>, log_s: Vec<f64>) -> Result<Self> {
        if mu.len() != log_s.len() {
            return invalid("mean-field mu and log_s lengths differ");
        }
        if mu.iter().chain(&log_s).any(|v| !v.is_finite()) {
            return invalid("mean-field parameters must be finite");
        }
        Ok(MeanFieldGaussian { mu, log_s })
    }

    /// Centered on θ = 1 with standard deviation 0.1 in log space.
    pub fn standard() -> Self {
        MeanFieldGaussian {
            mu: vec![0.0; N_THETA],
            log_s: vec![0.1f64.ln(); N_THETA],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// φ = (φ_θ, φ_f).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub theta_dist: MeanFieldGaussian,
    pub rnn: BridgeRnn,
}

impl VariationalParams {
    pub fn new(theta_dist: MeanFieldGaussian, rnn: BridgeRnn) -> Result<Self> {
        if theta_dist.len() != N_THETA {
            return invalid(format!(
                "expected {N_THETA} hyperparameter factors, got {}",
                theta_dist.len()
            ));
        }
        Ok(VariationalParams { theta_dist, rnn })
    }

    /// Default initialization for a kernel family.
    pub fn init(kind: KernelKind, hidden_size: usize, seed: u64) -> Result<Self> {
        VariationalParams::new(
            MeanFieldGaussian::standard(),
            BridgeRnn::new(hidden_size, kind.state_dim(), seed)?,
        )
    }

    pub fn n_params(&self) -> usize {
        2 * self.theta_dist.len() + self.rnn.weights().len()
    }

    /// `[mu, log_s, rnn weights]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(&self.theta_dist.mu);
        v.extend(&self.theta_dist.log_s);
        v.extend(self.rnn.weights());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return invalid(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.n_params()
            ));
        }
        let k = self.theta_dist.len();
        self.theta_dist.mu.copy_from_slice(&flat[..k]);
        self.theta_dist.log_s.copy_from_slice(&flat[k..2 * k]);
        self.rnn.weights_mut().copy_from_slice(&flat[2 * k..]);
        Ok(())
    }
}

/// Everything the ELBO needs besides φ.
#[derive(Debug, Clone)]
pub struct ElboProblem {
    pub kind: KernelKind,
    pub obs: Observations,
    /// Grid with every observation time attached.
    pub grid: TimeGrid,
    pub likelihood: Likelihood,
    pub sigma2_y: f64,
    pub prior: LogNormalPrior,
}

impl ElboProblem {
    pub fn new(
        kind: KernelKind,
        obs: Observations,
        grid: TimeGrid,
        likelihood: Likelihood,
        sigma2_y: f64,
    ) -> Result<Self> {
        if !(sigma2_y.is_finite() && sigma2_y > 0.0) && !obs.is_empty() {
            return invalid(format!("observation noise must be positive, got {sigma2_y}"));
        }
        let grid = grid.attach(&obs)?;
        Ok(ElboProblem {
            kind,
            obs,
            grid,
            likelihood,
            sigma2_y,
            prior: LogNormalPrior::default(),
        })
    }
}

/// Draws θ by reparameterization and returns it with `log q(θ)`, the density
/// over θ itself (Gaussian density of `η` minus `Σ η`, the log-Jacobian of `exp`).
pub fn sample_hyperparams(dist: &MeanFieldGaussian, sigma2_y: f64, seed: u64) -> Result<(KernelHyperparams, f64)> {
    let z = draw_theta_noise(&mut rng::stream(seed, 0), dist.len());
    hyperparams_from_noise(dist, sigma2_y, &z)
}

pub(crate) fn draw_theta_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// θ and `log q(θ)` for fixed standard-normal noise `z`.
pub fn hyperparams_from_noise(dist: &MeanFieldGaussian, sigma2_y: f64, z: &[f64]) -> Result<(KernelHyperparams, f64)> {
    if dist.len() != N_THETA || z.len() != N_THETA {
        return invalid(format!("expected {N_THETA} hyperparameter factors"));
    }
    let tape = Tape::new();
    let nodes = ThetaNodes::build(&tape, dist, z, false)?;
    let theta = nodes.values();
    let hp = KernelHyperparams::new(theta[0], theta[1], sigma2_y)?;
    Ok((hp, nodes.log_q.item()))
}

/// Tape representation of a reparameterized θ draw.
pub(crate) struct ThetaNodes<'t> {
    pub mu: DualTensor<'t>,
    pub log_s: DualTensor<'t>,
    pub eta: DualTensor<'t>,
    pub lambda: DualTensor<'t>,
    pub sigma2: DualTensor<'t>,
    pub log_q: DualTensor<'t>,
}

impl<'t> ThetaNodes<'t> {
    pub fn build(tape: &'t Tape, dist: &MeanFieldGaussian, z: &[f64], as_params: bool) -> Result<Self> {
        let k = dist.len();
        let leaf = |v: &[f64]| {
            if as_params {
                tape.parameter(1, k, v.to_vec())
            } else {
                tape.constant(1, k, v.to_vec())
            }
        };
        let mu = leaf(&dist.mu);
        let log_s = leaf(&dist.log_s);
        let s = log_s.exp();
        let eta = mu + s * tape.row(z.to_vec());
        let theta = eta.exp();
        let log_q = gaussian_log_pdf(eta, mu, s.square())? - eta.sum();
        Ok(ThetaNodes {
            mu,
            log_s,
            eta,
            lambda: theta.slice(0, 1)?,
            sigma2: theta.slice(1, 1)?,
            log_q,
        })
    }

    pub fn values(&self) -> [f64; 2] {
        [self.lambda.item(), self.sigma2.item()]
    }

    /// `log p(θ)` under the log-normal prior.
    pub fn log_prior(&self, prior: &LogNormalPrior) -> Result<DualTensor<'t>> {
        let tape = self.eta.tape();
        Ok(gaussian_log_pdf(
            self.eta,
            tape.scalar(prior.log_mean),
            tape.scalar(prior.log_std * prior.log_std),
        )? - self.eta.sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_spread_is_deterministic() {
        let dist = MeanFieldGaussian::new(vec![0.3, -0.4], vec![-20.0, -20.0]).unwrap();
        for seed in 0..5 {
            let (hp, _) = sample_hyperparams(&dist, 0.1, seed).unwrap();
            assert!((hp.lambda - 0.3f64.exp()).abs() < 1e-7);
            assert!((hp.sigma2_k - (-0.4f64).exp()).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_noise_gives_median() {
        let dist = MeanFieldGaussian::new(vec![0.7, 0.2], vec![0.1, -0.5]).unwrap();
        let (hp, _) = hyperparams_from_noise(&dist, 0.1, &[0.0, 0.0]).unwrap();
        assert_eq!(hp.lambda, 0.7f64.exp());
        assert_eq!(hp.sigma2_k, 0.2f64.exp());
    }

    #[test]
    fn log_q_is_a_normalized_density_over_theta() {
        // 1-D marginal of factor 0 integrated over θ by the trapezoid rule.
        let dist = MeanFieldGaussian::new(vec![0.2, 0.0], vec![-0.7, 0.0]).unwrap();
        let (mu, s) = (dist.mu[0], dist.log_s[0].exp());
        let (lo, hi, n) = (1e-6f64, 25.0f64, 200_000);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let theta = lo + i as f64 * h;
            let z0 = (theta.ln() - mu) / s;
            // Marginal of factor 0 = joint log q with factor 1 at its mode, minus
            // that factor's Gaussian normalizer at η = μ.
            let (_, lq) = hyperparams_from_noise(&dist, 0.1, &[z0, 0.0]).unwrap();
            let lq1 = -0.5 * (2.0 * std::f64::consts::PI).ln() - dist.log_s[1] - dist.mu[1];
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * (lq - lq1).exp();
        }
        integral *= h;
        assert!((integral - 1.0).abs() < 1e-3, "∫q = {integral}");
    }

    #[test]
    fn likelihood_parsing() {
        assert_eq!("square".parse::<Likelihood>().unwrap(), Likelihood::Square);
        assert!("cube".parse::<Likelihood>().is_err());
        assert_eq!(Likelihood::Square.apply(-3.0), 9.0);
    }

    #[test]
    fn flat_round_trip() {
        let mut p = VariationalParams::init(KernelKind::Exponential, 4, 1).unwrap();
        let flat: Vec<f64> = (0..p.n_params()).map(|i| i as f64 * 0.01).collect();
        p.set_flat(&flat).unwrap();
        assert_eq!(p.to_flat(), flat);
        assert!(p.set_flat(&flat[1..]).is_err());
    }
}
