use crate::autodiff::{gaussian_log_pdf, DualTensor, Tape};
use crate::error::{invalid, Error, Result};
use crate::gp::KernelKind;
use crate::rng;
use crate::sde::{PathBundle, TimeGrid};

use super::rnn::{rollout_on_tape, BridgeFeatures, BridgeNoise, RolloutNodes};
use super::{draw_theta_noise, ElboProblem, ThetaNodes, VariationalParams};

/// Per-sample summands of the ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub log_p_theta: f64,
    pub log_p_path: f64,
    pub log_lik: f64,
    pub neg_log_q_theta: f64,
    pub neg_log_q_path: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.log_p_theta + self.log_p_path + self.log_lik + self.neg_log_q_theta + self.neg_log_q_path
    }
}

/// Monte Carlo ELBO with the sample-averaged breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub terms: ElboTerms,
}

impl ElboEstimate {
    pub fn from_terms(samples: &[ElboTerms]) -> Result<Self> {
        if samples.is_empty() {
            return invalid("ELBO needs at least one sample");
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&ElboTerms) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let terms = ElboTerms {
            log_p_theta: mean(|t| t.log_p_theta),
            log_p_path: mean(|t| t.log_p_path),
            log_lik: mean(|t| t.log_lik),
            neg_log_q_theta: mean(|t| t.neg_log_q_theta),
            neg_log_q_path: mean(|t| t.neg_log_q_path),
        };
        Ok(ElboEstimate {
            value: mean(ElboTerms::total),
            n_samples: samples.len(),
            terms,
        })
    }
}

/// Which path distribution plays `q(f | θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathFamily {
    /// The recurrent bridge.
    #[default]
    Rnn,
    /// The prior Euler-Maruyama SDE itself, `q(f | θ) = p(f | θ)`
    /// (exponential kernel only).
    PriorSde,
}

/// ELBO estimate from `n` samples; sample `i` draws from stream `i` of `seed`.
pub fn elbo(params: &VariationalParams, problem: &ElboProblem, n: usize, seed: u64) -> Result<ElboEstimate> {
    evaluate(params, problem, PathFamily::Rnn, n, seed, false).map(|(e, _)| e)
}

/// ELBO estimate and its reparameterized gradient w.r.t. the flat φ
/// (layout of [`VariationalParams::to_flat`]).
pub fn elbo_and_gradient(
    params: &VariationalParams,
    problem: &ElboProblem,
    n: usize,
    seed: u64,
) -> Result<(ElboEstimate, Vec<f64>)> {
    evaluate(params, problem, PathFamily::Rnn, n, seed, true).map(|(e, g)| (e, g.expect("gradient requested")))
}

/// ELBO estimate with an explicit path family.
pub fn elbo_with_family(
    params: &VariationalParams,
    problem: &ElboProblem,
    family: PathFamily,
    n: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    evaluate(params, problem, family, n, seed, false).map(|(e, _)| e)
}

fn evaluate(
    params: &VariationalParams,
    problem: &ElboProblem,
    family: PathFamily,
    n: usize,
    seed: u64,
    want_grad: bool,
) -> Result<(ElboEstimate, Option<Vec<f64>>)> {
    if n == 0 {
        return invalid("ELBO needs n >= 1 samples");
    }
    if params.rnn.state_dim() != problem.kind.state_dim() {
        return invalid(format!(
            "bridge state dimension {} does not match the {} kernel",
            params.rnn.state_dim(),
            problem.kind
        ));
    }
    let features = BridgeFeatures::new(&problem.grid, &problem.obs);
    let mut samples = Vec::with_capacity(n);
    let mut grad = want_grad.then(|| vec![0.0; params.n_params()]);
    for i in 0..n {
        let (terms, g) =
            sample_terms(params, problem, family, &features, seed, i, want_grad).map_err(|e| tag_sample(e, i))?;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
        samples.push(terms);
    }
    if let Some(g) = grad.as_mut() {
        g.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok((ElboEstimate::from_terms(&samples)?, grad))
}

fn tag_sample(e: Error, i: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("sample {i}: {msg}")),
        Error::InvalidArgument(msg) => Error::InvalidArgument(format!("sample {i}: {msg}")),
        other => other,
    }
}

fn sample_terms(
    params: &VariationalParams,
    problem: &ElboProblem,
    family: PathFamily,
    features: &BridgeFeatures,
    seed: u64,
    index: usize,
    want_grad: bool,
) -> Result<(ElboTerms, Option<Vec<f64>>)> {
    let m = problem.kind.state_dim();
    let mut rng = rng::stream(seed, index as u64);
    let z = draw_theta_noise(&mut rng, params.theta_dist.len());
    let noise = BridgeNoise::draw(&mut rng, m, problem.grid.steps());

    let tape = Tape::new();
    let theta = ThetaNodes::build(&tape, &params.theta_dist, &z, want_grad)?;
    let leaves = params.rnn.leaves(&tape, want_grad);
    let rollout = match family {
        PathFamily::Rnn => rollout_on_tape(&leaves, &tape, theta.eta, features, &problem.grid, &noise)?,
        PathFamily::PriorSde => prior_rollout(&tape, &theta, problem, &noise)?,
    };

    let log_p_theta = theta.log_prior(&problem.prior)?;
    let log_p_path = prior_log_density(
        &tape,
        theta.lambda,
        theta.sigma2,
        problem.kind,
        &rollout.states,
        &problem.grid,
    )?;
    let log_lik = log_likelihood(&tape, &rollout.states, problem)?;
    let total = log_p_theta + log_p_path + log_lik - theta.log_q - rollout.log_q;
    let terms = ElboTerms {
        log_p_theta: log_p_theta.item(),
        log_p_path: log_p_path.item(),
        log_lik: log_lik.item(),
        neg_log_q_theta: -theta.log_q.item(),
        neg_log_q_path: -rollout.log_q.item(),
    };
    if let Some(fault) = tape.fault() {
        return Err(Error::Numerical(fault));
    }
    let grad = if want_grad {
        let grads = tape.backward(total)?;
        let mut g = grads.get_or_zero(theta.mu);
        g.extend(grads.get_or_zero(theta.log_s));
        g.extend(leaves.gradient(&grads));
        Some(g)
    } else {
        None
    };
    Ok((terms, grad))
}

/// `q(f | θ) = p(f | θ)`: Euler-Maruyama prior rollout from `N(0, σ²_k)`.
fn prior_rollout<'t>(
    tape: &'t Tape,
    theta: &ThetaNodes<'t>,
    problem: &ElboProblem,
    noise: &BridgeNoise,
) -> Result<RolloutNodes<'t>> {
    if problem.kind != KernelKind::Exponential {
        return Err(Error::Unsupported(
            "prior path family is only wired for the exponential kernel".into(),
        ));
    }
    let (lambda, s2) = (theta.lambda, theta.sigma2);
    let f0 = s2.log().mul_half_exp() * tape.scalar(noise.init[0]);
    let mut log_q = gaussian_log_pdf(f0, tape.scalar(0.0), s2)?;
    let c = (s2 * lambda * 2.0).log().mul_half_exp();
    let mut states = vec![f0];
    let (mut drifts, mut diffusions) = (Vec::new(), Vec::new());
    let mut f = f0;
    for k in 0..problem.grid.steps() {
        let dt = problem.grid.dt(k);
        let drift = -(lambda * f);
        let mean = drift * dt;
        let incr = mean + c * (noise.steps[k] * dt.sqrt());
        log_q = log_q + gaussian_log_pdf(incr, mean, c.square() * dt)?;
        drifts.push(drift.item());
        diffusions.push(c.item());
        f = f + incr;
        states.push(f);
    }
    Ok(RolloutNodes {
        states,
        log_q,
        drifts,
        diffusions,
    })
}

trait HalfExp<'t> {
    fn mul_half_exp(self) -> DualTensor<'t>;
}

impl<'t> HalfExp<'t> for DualTensor<'t> {
    /// `exp(x / 2)`, i.e. a square root when `x` is a log.
    fn mul_half_exp(self) -> DualTensor<'t> {
        (self * 0.5).exp()
    }
}

fn component_row<'t>(tape: &'t Tape, states: &[DualTensor<'t>], c: usize) -> Result<DualTensor<'t>> {
    let cols = states.iter().map(|s| s.slice(c, 1)).collect::<Result<Vec<_>>>()?;
    tape.concat(&cols)
}

/// `log p(f | θ)` of the discretized prior, differentiable in θ and the path.
/// Same conventions as [`crate::sde::em_log_density`].
fn prior_log_density<'t>(
    tape: &'t Tape,
    lambda: DualTensor<'t>,
    s2: DualTensor<'t>,
    kind: KernelKind,
    states: &[DualTensor<'t>],
    grid: &TimeGrid,
) -> Result<DualTensor<'t>> {
    let steps = states.len() - 1;
    let dt = tape.row((0..steps).map(|k| grid.dt(k)).collect());
    match kind {
        KernelKind::Exponential => {
            let mut lp = gaussian_log_pdf(states[0], tape.scalar(0.0), s2)?;
            if steps > 0 {
                let path = tape.concat(states)?;
                let prev = path.slice(0, steps)?;
                let next = path.slice(1, steps)?;
                let mean = prev - lambda * (dt * prev);
                let var = (s2 * lambda * 2.0) * dt;
                lp = lp + gaussian_log_pdf(next, mean, var)?;
            }
            Ok(lp)
        }
        KernelKind::Matern32 => {
            let kappa = lambda * 3f64.sqrt();
            let p1 = s2;
            let p2 = kappa.square() * s2;
            let f1 = component_row(tape, states, 0)?;
            let f2 = component_row(tape, states, 1)?;
            let mut lp = gaussian_log_pdf(f1.slice(0, 1)?, tape.scalar(0.0), p1)?
                + gaussian_log_pdf(f2.slice(0, 1)?, tape.scalar(0.0), p2)?;
            if steps > 0 {
                // A = e^{-κΔt} [[1 + κΔt, Δt], [-κ²Δt, 1 - κΔt]], Q = P∞ - A P∞ Aᵀ
                let kdt = kappa * dt;
                let e = (-kdt).exp();
                let a11 = e * (kdt + 1.0);
                let a12 = e * dt;
                let a21 = -(e * kappa * kdt);
                let a22 = e * (1.0 - kdt);
                let q11 = p1 - (a11.square() * p1 + a12.square() * p2);
                let q12 = -(a11 * a21 * p1 + a12 * a22 * p2);
                let q22 = p2 - (a21.square() * p1 + a22.square() * p2);
                let (x1p, x2p) = (f1.slice(0, steps)?, f2.slice(0, steps)?);
                let r1 = f1.slice(1, steps)? - (a11 * x1p + a12 * x2p);
                let r2 = f2.slice(1, steps)? - (a21 * x1p + a22 * x2p);
                let det = q11 * q22 - q12.square();
                if det.values().iter().any(|d| !(*d > 0.0)) {
                    return Err(Error::Numerical("singular Matérn-3/2 transition covariance".into()));
                }
                let quad = (q22 * r1.square() - 2.0 * q12 * r1 * r2 + q11 * r2.square()) / det;
                let ln_2pi = (2.0 * std::f64::consts::PI).ln();
                lp = lp - (det.log() + quad).sum() * 0.5 - ln_2pi * steps as f64;
            }
            Ok(lp)
        }
    }
}

/// `log p(f | θ)` of a discretized prior path (state-major, `m` values per
/// grid point) and its gradient w.r.t. `[log λ, log σ²_k]` followed by the path.
pub fn path_log_density_and_gradient(
    kind: KernelKind,
    log_theta: [f64; 2],
    path: &[f64],
    grid: &TimeGrid,
) -> Result<(f64, Vec<f64>)> {
    let m = kind.state_dim();
    if path.len() != m * grid.len() {
        return invalid(format!(
            "path has {} values, expected {} ({} grid points x {m})",
            path.len(),
            m * grid.len(),
            grid.len()
        ));
    }
    let tape = Tape::new();
    let eta = tape.parameter(1, 2, log_theta.to_vec());
    let lambda = eta.slice(0, 1)?.exp();
    let s2 = eta.slice(1, 1)?.exp();
    let states: Vec<DualTensor> = path.chunks(m).map(|c| tape.parameter(1, m, c.to_vec())).collect();
    let lp = prior_log_density(&tape, lambda, s2, kind, &states, grid)?;
    if let Some(fault) = tape.fault() {
        return Err(Error::Numerical(fault));
    }
    let grads = tape.backward(lp)?;
    let mut g = grads.get_or_zero(eta);
    for s in &states {
        g.extend(grads.get_or_zero(*s));
    }
    Ok((lp.item(), g))
}

fn log_likelihood<'t>(tape: &'t Tape, states: &[DualTensor<'t>], problem: &ElboProblem) -> Result<DualTensor<'t>> {
    let positions = problem.grid.observation_positions();
    if positions.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let latent = positions
        .iter()
        .map(|&k| states[k].slice(0, 1))
        .collect::<Result<Vec<_>>>()?;
    let predicted = problem.likelihood.apply_tape(tape.concat(&latent)?);
    gaussian_log_pdf(
        tape.row(problem.obs.values().to_vec()),
        predicted,
        tape.scalar(problem.sigma2_y),
    )
}

/// `n` bridge paths with θ drawn per path; returns the first state component.
/// Path `i` uses the same draws as ELBO sample `i` for the same seed.
pub fn generate_paths(params: &VariationalParams, problem: &ElboProblem, n: usize, seed: u64) -> Result<PathBundle> {
    if n == 0 {
        return invalid("generate_paths needs n >= 1");
    }
    let m = params.rnn.state_dim();
    let features = BridgeFeatures::new(&problem.grid, &problem.obs);
    let mut data = Vec::with_capacity(n * problem.grid.len());
    for i in 0..n {
        let mut rng = rng::stream(seed, i as u64);
        let z = draw_theta_noise(&mut rng, params.theta_dist.len());
        let noise = BridgeNoise::draw(&mut rng, m, problem.grid.steps());
        let tape = Tape::new();
        let theta = ThetaNodes::build(&tape, &params.theta_dist, &z, false)?;
        let leaves = params.rnn.leaves(&tape, false);
        let rollout = rollout_on_tape(&leaves, &tape, theta.eta, &features, &problem.grid, &noise)
            .map_err(|e| tag_sample(e, i))?;
        for s in &rollout.states {
            data.push(s.values()[0]);
        }
    }
    PathBundle::new(problem.grid.clone(), n, 1, data)
}
