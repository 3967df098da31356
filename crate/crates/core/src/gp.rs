//! Exact batch Gaussian process regression and posterior sampling.
//!
//! This is the reference every approximation in the crate is checked
//! against: dense Gram matrices, Cholesky solves and Cholesky sampling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, numerical, Error, Result};
use crate::rng;
use crate::sde::{PathBundle, TimeGrid};

/// Stationary covariance families with a finite state-space form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelKind {
    /// Matérn ν = 1/2, state dimension 1.
    #[default]
    Exponential,
    /// Matérn ν = 3/2, state dimension 2.
    Matern32,
}

impl KernelKind {
    /// Dimension of the companion-form state.
    pub fn state_dim(self) -> usize {
        match self {
            KernelKind::Exponential => 1,
            KernelKind::Matern32 => 2,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Exponential => "exponential",
            KernelKind::Matern32 => "matern32",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exponential" | "matern12" => Ok(KernelKind::Exponential),
            "matern32" => Ok(KernelKind::Matern32),
            other => invalid(format!(
                "unknown kernel `{other}` (only exponential and matern32 have a state-space form here)"
            )),
        }
    }
}

/// Kernel parameters plus the (fixed, known) observation noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHyperparams {
    /// Inverse length-scale, 1/time.
    pub lambda: f64,
    /// Kernel variance.
    pub sigma2_k: f64,
    /// Observation noise variance.
    pub sigma2_y: f64,
}

impl KernelHyperparams {
    pub fn new(lambda: f64, sigma2_k: f64, sigma2_y: f64) -> Result<Self> {
        let hp = KernelHyperparams {
            lambda,
            sigma2_k,
            sigma2_y,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return invalid(format!("lambda must be positive and finite, got {}", self.lambda));
        }
        if !(self.sigma2_k.is_finite() && self.sigma2_k > 0.0) {
            return invalid(format!("sigma2_k must be positive and finite, got {}", self.sigma2_k));
        }
        if !(self.sigma2_y.is_finite() && self.sigma2_y >= 0.0) {
            return invalid(format!(
                "sigma2_y must be non-negative and finite, got {}",
                self.sigma2_y
            ));
        }
        Ok(())
    }
}

// f64's Display is the shortest representation that parses back to the same
// bits, so this text form round-trips exactly.
impl fmt::Display for KernelHyperparams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lambda={},sigma2_k={},sigma2_y={}",
            self.lambda, self.sigma2_k, self.sigma2_y
        )
    }
}

impl FromStr for KernelHyperparams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut lambda, mut sigma2_k, mut sigma2_y) = (None, None, None);
        for part in s.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{part}`")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number for {key}: `{value}`")))?;
            let slot = match key.trim() {
                "lambda" => &mut lambda,
                "sigma2_k" => &mut sigma2_k,
                "sigma2_y" => &mut sigma2_y,
                other => return invalid(format!("unknown hyperparameter `{other}`")),
            };
            *slot = Some(value);
        }
        match (lambda, sigma2_k, sigma2_y) {
            (Some(l), Some(k), Some(y)) => KernelHyperparams::new(l, k, y),
            _ => invalid("hyperparameters need lambda, sigma2_k and sigma2_y"),
        }
    }
}

/// Noisy scalar observations at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Observations {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return invalid(format!(
                "observation times ({}) and values ({}) differ in length",
                times.len(),
                values.len()
            ));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return invalid("observations must be finite");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("observation times must be strictly increasing");
        }
        Ok(Observations { times, values })
    }

    pub fn empty() -> Self {
        Observations {
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Independent log-normal prior on the hyperparameters: `log θᵢ ~ N(m, s²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalPrior {
    pub log_mean: f64,
    pub log_std: f64,
}

impl Default for LogNormalPrior {
    fn default() -> Self {
        LogNormalPrior {
            log_mean: 0.0,
            log_std: 1.0,
        }
    }
}

impl LogNormalPrior {
    /// Density of `η = log θ` (not of θ).
    pub fn log_density_unconstrained(&self, eta: &[f64]) -> f64 {
        let s2 = self.log_std * self.log_std;
        eta.iter()
            .map(|e| -0.5 * ((e - self.log_mean).powi(2) / s2 + (2.0 * PI * s2).ln()))
            .sum()
    }
}

/// Posterior moments of the latent function on a query grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub grid: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GpPosterior {
    /// Marginal variances, clamped at zero.
    pub fn variances(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.max(0.0)).collect()
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        invalid(format!("{what} must be finite"))
    }
}

/// Covariance k(t, t') of the chosen family.
pub fn kernel_eval(kind: KernelKind, hp: &KernelHyperparams, t: f64, tp: f64) -> Result<f64> {
    if !(t.is_finite() && tp.is_finite()) {
        return invalid(format!("kernel inputs must be finite, got ({t}, {tp})"));
    }
    hp.validate()?;
    Ok(kernel_unchecked(kind, hp, (t - tp).abs()))
}

fn kernel_unchecked(kind: KernelKind, hp: &KernelHyperparams, r: f64) -> f64 {
    match kind {
        KernelKind::Exponential => hp.sigma2_k * (-hp.lambda * r).exp(),
        KernelKind::Matern32 => {
            let a = 3f64.sqrt() * hp.lambda * r;
            hp.sigma2_k * (1.0 + a) * (-a).exp()
        }
    }
}

/// Cross-covariance matrix between two sets of times.
pub fn gram_matrix(kind: KernelKind, hp: &KernelHyperparams, times_a: &[f64], times_b: &[f64]) -> Result<DMatrix<f64>> {
    hp.validate()?;
    check_finite(times_a, "times")?;
    check_finite(times_b, "times")?;
    Ok(DMatrix::from_fn(times_a.len(), times_b.len(), |i, j| {
        kernel_unchecked(kind, hp, (times_a[i] - times_b[j]).abs())
    }))
}

/// Cholesky factorization with an escalating diagonal jitter ladder:
/// none, then `1e-9 * scale`, then `1e-6 * scale`.
pub(crate) fn cholesky_jittered(m: &DMatrix<f64>, scale: f64) -> Result<Cholesky<f64, Dyn>> {
    for rel in [0.0, 1e-9, 1e-6] {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += rel * scale;
        }
        if let Some(chol) = Cholesky::new(a) {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(chol);
            }
        }
    }
    let min_diag = m.diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
    numerical(format!(
        "Cholesky failed on {n}x{n} matrix after jitter 1e-6*{scale:e} (min diagonal {min_diag:e})",
        n = m.nrows()
    ))
}

/// Conditions the zero-mean GP on `obs` and returns moments on `grid`.
pub fn gp_regress(kind: KernelKind, hp: &KernelHyperparams, obs: &Observations, grid: &[f64]) -> Result<GpPosterior> {
    check_finite(grid, "grid")?;
    let k_ss = gram_matrix(kind, hp, grid, grid)?;
    if obs.is_empty() {
        return Ok(GpPosterior {
            grid: grid.to_vec(),
            mean: DVector::zeros(grid.len()),
            cov: k_ss,
        });
    }
    let mut k = gram_matrix(kind, hp, obs.times(), obs.times())?;
    for i in 0..k.nrows() {
        k[(i, i)] += hp.sigma2_y;
    }
    let k_s = gram_matrix(kind, hp, obs.times(), grid)?;
    let chol = cholesky_jittered(&k, hp.sigma2_k)?;
    let y = DVector::from_column_slice(obs.values());
    let alpha = chol.solve(&y);
    let mean = k_s.transpose() * alpha;
    // V = L⁻¹ K_*, cov = K_** − VᵀV.
    let mut v = k_s;
    chol.l_dirty().lower_triangle().solve_lower_triangular_mut(&mut v);
    let mut cov = k_ss - v.transpose() * v;
    symmetrize(&mut cov);
    Ok(GpPosterior {
        grid: grid.to_vec(),
        mean,
        cov,
    })
}

/// Log marginal likelihood `log p(y | θ)` of the observations.
pub fn gp_log_marginal(kind: KernelKind, hp: &KernelHyperparams, obs: &Observations) -> Result<f64> {
    if obs.is_empty() {
        return Ok(0.0);
    }
    let mut k = gram_matrix(kind, hp, obs.times(), obs.times())?;
    for i in 0..k.nrows() {
        k[(i, i)] += hp.sigma2_y;
    }
    let chol = cholesky_jittered(&k, hp.sigma2_k)?;
    let y = DVector::from_column_slice(obs.values());
    let alpha = chol.solve(&y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let n = obs.len() as f64;
    Ok(-0.5 * (y.dot(&alpha) + log_det + n * (2.0 * PI).ln()))
}

struct NegLogPosterior<'a> {
    kind: KernelKind,
    obs: &'a Observations,
    sigma2_y: f64,
    prior: LogNormalPrior,
}

impl CostFunction for NegLogPosterior<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, eta: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let hp = match KernelHyperparams::new(eta[0].exp(), eta[1].exp(), self.sigma2_y) {
            Ok(hp) => hp,
            Err(_) => return Ok(f64::INFINITY),
        };
        Ok(match gp_log_marginal(self.kind, &hp, self.obs) {
            Ok(ll) => -(ll + self.prior.log_density_unconstrained(eta)),
            Err(_) => f64::INFINITY,
        })
    }
}

/// Type-II MAP estimate of `(λ, σ²_k)`: maximizes `log p(y | θ) + log p(log θ)`
/// over `log θ`. A coarse grid over ±3 prior standard deviations picks the
/// start, Nelder–Mead refines it.
pub fn fit_hyperparams(
    kind: KernelKind,
    obs: &Observations,
    sigma2_y: f64,
    prior: &LogNormalPrior,
) -> Result<KernelHyperparams> {
    if !(prior.log_std > 0.0 && prior.log_std.is_finite() && prior.log_mean.is_finite()) {
        return invalid("prior needs a finite mean and positive standard deviation");
    }
    KernelHyperparams::new(1.0, 1.0, sigma2_y)?;
    let problem = NegLogPosterior {
        kind,
        obs,
        sigma2_y,
        prior: *prior,
    };
    const COARSE: usize = 25;
    let at = |i: usize| prior.log_mean + prior.log_std * (-3.0 + 6.0 * i as f64 / (COARSE - 1) as f64);
    let mut best = (f64::INFINITY, vec![prior.log_mean; 2]);
    for i in 0..COARSE {
        for j in 0..COARSE {
            let eta = vec![at(i), at(j)];
            let c = problem.cost(&eta).unwrap_or(f64::INFINITY);
            if c < best.0 {
                best = (c, eta);
            }
        }
    }
    if !best.0.is_finite() {
        return numerical("marginal likelihood is not finite anywhere on the search grid");
    }
    let step = 0.5 * prior.log_std;
    let start = best.1;
    let simplex = vec![
        start.clone(),
        vec![start[0] + step, start[1]],
        vec![start[0], start[1] + step],
    ];
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-12)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|state| state.max_iters(1000))
        .run()
        .map_err(|e| Error::Numerical(format!("hyperparameter fit failed: {e}")))?;
    let eta = res.state.best_param.unwrap_or(start);
    KernelHyperparams::new(eta[0].exp(), eta[1].exp(), sigma2_y)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Draws `n` joint samples from the posterior, one ChaCha stream per sample.
pub fn gp_sample(posterior: &GpPosterior, n: usize, seed: u64) -> Result<PathBundle> {
    if n == 0 {
        return invalid("gp_sample needs n >= 1");
    }
    let len = posterior.grid.len();
    let scale = if len == 0 {
        0.0
    } else {
        posterior.cov.diagonal().iter().map(|v| v.abs()).sum::<f64>() / len as f64
    };
    // A PSD matrix with zero diagonal is the zero matrix; its factor is zero.
    let factor = if scale == 0.0 {
        DMatrix::zeros(len, len)
    } else {
        cholesky_jittered(&posterior.cov, scale)?.l()
    };
    let grid = TimeGrid::new(posterior.grid.clone())?;
    let mut data = Vec::with_capacity(n * len);
    for i in 0..n {
        let mut rng = rng::stream(seed, i as u64);
        let z = DVector::from_fn(len, |_, _| StandardNormal.sample(&mut rng));
        let draw = &posterior.mean + &factor * z;
        data.extend(draw.iter());
    }
    PathBundle::new(grid, n, 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> KernelHyperparams {
        KernelHyperparams::new(1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn kernel_values() {
        let hp = unit();
        assert_eq!(kernel_eval(KernelKind::Exponential, &hp, 0.0, 0.0).unwrap(), 1.0);
        let half = kernel_eval(KernelKind::Exponential, &hp, 0.0, 2f64.ln()).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        let m = KernelHyperparams::new(2.0, 3.0, 0.0).unwrap();
        assert_eq!(kernel_eval(KernelKind::Matern32, &m, 1.5, 1.5).unwrap(), 3.0);
        let e = KernelHyperparams::new(0.5, 2.0, 0.0).unwrap();
        let v = kernel_eval(KernelKind::Exponential, &e, 1.0, 5.0).unwrap();
        // 2·e⁻² by hand
        assert!((v - 0.270_670_566_473_225_4).abs() < 1e-12);
    }

    #[test]
    fn kernel_rejects_non_finite() {
        let hp = unit();
        assert!(matches!(
            kernel_eval(KernelKind::Exponential, &hp, f64::NAN, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(kernel_eval(KernelKind::Matern32, &hp, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(KernelHyperparams::new(0.0, 1.0, 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, -1.0, 0.1).is_err());
        assert!(KernelHyperparams::new(1.0, 1.0, -0.1).is_err());
        assert!(KernelHyperparams::new(1.0, 1.0, 0.0).is_ok());
        assert!("lambda=1,sigma2_k=1".parse::<KernelHyperparams>().is_err());
    }

    #[test]
    fn small_gram_matrices() {
        let hp = unit();
        let g = gram_matrix(KernelKind::Exponential, &hp, &[0.0], &[0.0]).unwrap();
        assert_eq!(g, DMatrix::from_element(1, 1, 1.0));
        let t = [0.0, 2f64.ln()];
        let g = gram_matrix(KernelKind::Exponential, &hp, &t, &t).unwrap();
        assert!((g[(0, 1)] - 0.5).abs() < 1e-15 && (g[(1, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn regression_prior_recovery() {
        let hp = KernelHyperparams::new(0.7, 1.3, 0.1).unwrap();
        let grid = [0.0, 0.5, 1.7, 3.0];
        for kind in [KernelKind::Exponential, KernelKind::Matern32] {
            let post = gp_regress(kind, &hp, &Observations::empty(), &grid).unwrap();
            assert_eq!(post.mean, DVector::zeros(4));
            assert_eq!(post.cov, gram_matrix(kind, &hp, &grid, &grid).unwrap());
        }
    }

    #[test]
    fn regression_noise_free_interpolation() {
        let hp = unit();
        let obs = Observations::new(vec![0.0], vec![1.0]).unwrap();
        let post = gp_regress(KernelKind::Exponential, &hp, &obs, &[0.0]).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-10);
        assert!(post.cov[(0, 0)].abs() < 1e-10);
    }

    #[test]
    fn regression_matches_dense_inverse() {
        let hp = KernelHyperparams::new(0.8, 1.4, 0.1).unwrap();
        let obs = Observations::new(vec![0.3, 1.1, 2.6], vec![0.5, -0.2, 1.0]).unwrap();
        let grid: Vec<f64> = (0..10).map(|i| i as f64 * 0.35).collect();
        for kind in [KernelKind::Exponential, KernelKind::Matern32] {
            let post = gp_regress(kind, &hp, &obs, &grid).unwrap();
            // explicit-inverse reference
            let mut k = gram_matrix(kind, &hp, obs.times(), obs.times()).unwrap();
            k += DMatrix::identity(3, 3) * hp.sigma2_y;
            let kinv = k.try_inverse().unwrap();
            let ks = gram_matrix(kind, &hp, obs.times(), &grid).unwrap();
            let kss = gram_matrix(kind, &hp, &grid, &grid).unwrap();
            let y = DVector::from_column_slice(obs.values());
            let mean = ks.transpose() * &kinv * y;
            let cov = kss - ks.transpose() * &kinv * &ks;
            assert!((post.mean - mean).amax() < 1e-8);
            assert!((post.cov - cov).amax() < 1e-8);
        }
    }

    #[test]
    fn zero_covariance_samples_equal_mean() {
        let post = GpPosterior {
            grid: vec![0.0, 1.0, 2.0],
            mean: DVector::from_vec(vec![0.5, -1.0, 2.0]),
            cov: DMatrix::zeros(3, 3),
        };
        let bundle = gp_sample(&post, 4, 11).unwrap();
        for i in 0..4 {
            assert_eq!(bundle.projected(i), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let hp = unit();
        let grid = [0.0, 0.4, 0.9];
        let post = gp_regress(KernelKind::Exponential, &hp, &Observations::empty(), &grid).unwrap();
        assert_eq!(gp_sample(&post, 3, 5).unwrap(), gp_sample(&post, 3, 5).unwrap());
        assert_ne!(gp_sample(&post, 3, 5).unwrap(), gp_sample(&post, 3, 6).unwrap());
        assert!(gp_sample(&post, 0, 5).is_err());
    }

    #[test]
    fn sample_mean_law_of_large_numbers() {
        let hp = KernelHyperparams::new(1.0, 1.0, 0.1).unwrap();
        let obs = Observations::new(vec![0.5, 1.5], vec![1.0, -0.5]).unwrap();
        let grid = [0.0, 1.0, 2.0];
        let post = gp_regress(KernelKind::Exponential, &hp, &obs, &grid).unwrap();
        let n = 5000;
        let bundle = gp_sample(&post, n, 3).unwrap();
        for k in 0..3 {
            let mean = (0..n).map(|i| bundle.value(i, k, 0)).sum::<f64>() / n as f64;
            let sd = post.cov[(k, k)].sqrt();
            assert!((mean - post.mean[k]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn exact_observation_contracts_variance() {
        let hp = KernelHyperparams::new(1.3, 0.9, 0.0).unwrap();
        let grid = [0.0, 0.7, 1.4, 2.1];
        for kind in [KernelKind::Exponential, KernelKind::Matern32] {
            let obs = Observations::new(vec![0.7], vec![0.3]).unwrap();
            let post = gp_regress(kind, &hp, &obs, &grid).unwrap();
            assert!(post.cov[(1, 1)] <= 1e-10);
        }
    }

    #[test]
    fn log_marginal_matches_direct_density() {
        let hp = KernelHyperparams::new(0.7, 1.3, 0.2).unwrap();
        let obs = Observations::new(vec![0.1, 0.9, 2.0], vec![0.5, -0.2, 1.1]).unwrap();
        let mut k = gram_matrix(KernelKind::Exponential, &hp, obs.times(), obs.times()).unwrap();
        for i in 0..3 {
            k[(i, i)] += 0.2;
        }
        let y = DVector::from_column_slice(obs.values());
        let inv = k.clone().try_inverse().unwrap();
        let direct = -0.5 * ((y.transpose() * inv * &y)[0] + k.determinant().ln() + 3.0 * (2.0 * PI).ln());
        let ll = gp_log_marginal(KernelKind::Exponential, &hp, &obs).unwrap();
        assert!((ll - direct).abs() < 1e-10);
        assert_eq!(
            gp_log_marginal(KernelKind::Exponential, &hp, &Observations::empty()).unwrap(),
            0.0
        );
    }

    #[test]
    fn map_fit_beats_a_fine_grid_and_is_stationary() {
        let obs = Observations::new(vec![0.5, 1.5, 2.5, 3.5, 4.5], vec![0.9, 0.4, -0.3, -1.0, -0.2]).unwrap();
        let prior = LogNormalPrior::default();
        let objective = |a: f64, b: f64| {
            let hp = KernelHyperparams::new(a.exp(), b.exp(), 0.1).unwrap();
            gp_log_marginal(KernelKind::Exponential, &hp, &obs).unwrap() + prior.log_density_unconstrained(&[a, b])
        };
        let fit = fit_hyperparams(KernelKind::Exponential, &obs, 0.1, &prior).unwrap();
        let (a, b) = (fit.lambda.ln(), fit.sigma2_k.ln());
        let at_fit = objective(a, b);
        for i in 0..=80 {
            for j in 0..=80 {
                let g = objective(-3.0 + 0.075 * i as f64, -3.0 + 0.075 * j as f64);
                assert!(g <= at_fit + 1e-9);
            }
        }
        let h = 1e-5;
        let da = (objective(a + h, b) - objective(a - h, b)) / (2.0 * h);
        let db = (objective(a, b + h) - objective(a, b - h)) / (2.0 * h);
        assert!(da.abs() < 1e-4 && db.abs() < 1e-4, "gradient ({da}, {db})");
        assert_eq!(fit.sigma2_y, 0.1);
    }

    #[test]
    fn map_fit_without_data_is_the_prior_mode() {
        let prior = LogNormalPrior {
            log_mean: 0.3,
            log_std: 0.5,
        };
        let fit = fit_hyperparams(KernelKind::Matern32, &Observations::empty(), 0.1, &prior).unwrap();
        assert!((fit.lambda.ln() - 0.3).abs() < 1e-5);
        assert!((fit.sigma2_k.ln() - 0.3).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric_and_stationary(
            t in -50.0f64..50.0, tp in -50.0f64..50.0, shift in -20.0f64..20.0,
            lambda in 0.05f64..5.0, s2 in 0.1f64..5.0, matern in any::<bool>(),
        ) {
            let kind = if matern { KernelKind::Matern32 } else { KernelKind::Exponential };
            let hp = KernelHyperparams::new(lambda, s2, 0.0).unwrap();
            let a = kernel_eval(kind, &hp, t, tp).unwrap();
            prop_assert_eq!(a, kernel_eval(kind, &hp, tp, t).unwrap());
            let b = kernel_eval(kind, &hp, t + shift, tp + shift).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * s2);
            prop_assert!(a <= s2);
        }

        #[test]
        fn gram_plus_jitter_is_positive_definite(
            times in proptest::collection::vec(-10.0f64..10.0, 1..=8),
            lambda in 0.1f64..3.0, s2 in 0.5f64..2.0, matern in any::<bool>(),
        ) {
            let kind = if matern { KernelKind::Matern32 } else { KernelKind::Exponential };
            let hp = KernelHyperparams::new(lambda, s2, 0.0).unwrap();
            let mut g = gram_matrix(kind, &hp, &times, &times).unwrap();
            for i in 0..g.nrows() { g[(i, i)] += 1e-9; }
            prop_assert!(Cholesky::new(g).is_some());
        }

        #[test]
        fn hyperparams_text_round_trip(
            lambda in 1e-6f64..1e6, s2 in 1e-6f64..1e6, s2y in 0.0f64..10.0,
        ) {
            let hp = KernelHyperparams::new(lambda, s2, s2y).unwrap();
            let back: KernelHyperparams = hp.to_string().parse().unwrap();
            prop_assert_eq!(hp, back);
        }
    }
}
