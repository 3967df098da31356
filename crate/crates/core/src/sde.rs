//! Euler-Maruyama discretization of the prior SDE: forward simulation and
//! path log-densities.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, numerical, Result};
use crate::gp::{KernelHyperparams, Observations};
use crate::rng;
use crate::ssm::{discretize, find_time, merge_grid, StateSpaceModel};

/// Strictly increasing time points with the grid positions of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    obs_index: Vec<Option<usize>>,
}

impl TimeGrid {
    /// A grid without observations attached.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return invalid("time grid needs at least one point");
        }
        if points.iter().any(|t| !t.is_finite()) || points.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("time grid must be finite and strictly increasing");
        }
        let obs_index = vec![None; points.len()];
        Ok(TimeGrid { points, obs_index })
    }

    /// `steps + 1` evenly spaced points on `[start, end]`.
    pub fn uniform(start: f64, end: f64, steps: usize) -> Result<Self> {
        if !(end > start) || steps == 0 {
            return invalid(format!(
                "uniform grid needs end > start and steps >= 1, got [{start}, {end}] / {steps}"
            ));
        }
        let width = end - start;
        TimeGrid::new((0..=steps).map(|i| start + width * i as f64 / steps as f64).collect())
    }

    /// Uniform grid merged with the observation times, observations indexed.
    pub fn with_observations(start: f64, end: f64, steps: usize, obs: &Observations) -> Result<Self> {
        let uniform = TimeGrid::uniform(start, end, steps)?;
        TimeGrid::new(merge_grid(&uniform.points, obs.times()))?.attach(obs)
    }

    /// Records where each observation sits; every observation time must be on the grid.
    pub fn attach(mut self, obs: &Observations) -> Result<Self> {
        self.obs_index = vec![None; self.points.len()];
        for (j, &tau) in obs.times().iter().enumerate() {
            match find_time(&self.points, tau) {
                Some(k) if self.obs_index[k].is_none() => self.obs_index[k] = Some(j),
                Some(_) => return invalid(format!("two observations share grid point {tau}")),
                None => return invalid(format!("observation time {tau} is not on the grid")),
            }
        }
        Ok(self)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of steps, `T`.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    /// Step length from point `k` to `k + 1`.
    pub fn dt(&self, k: usize) -> f64 {
        self.points[k + 1] - self.points[k]
    }

    /// Observation index recorded at grid point `k`.
    pub fn observation_at(&self, k: usize) -> Option<usize> {
        self.obs_index[k]
    }

    /// Grid indices of the attached observations, in observation order.
    pub fn observation_positions(&self) -> Vec<usize> {
        let mut pos: Vec<(usize, usize)> = self
            .obs_index
            .iter()
            .enumerate()
            .filter_map(|(k, j)| j.map(|j| (j, k)))
            .collect();
        pos.sort_unstable();
        pos.into_iter().map(|(_, k)| k).collect()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

/// `n_paths` trajectories of an `m`-dimensional state on a shared grid,
/// stored path-major then time then component.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PathBundle {
    pub fn new(grid: TimeGrid, n_paths: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return invalid("path state dimension must be >= 1");
        }
        if data.len() != n_paths * grid.len() * dim {
            return invalid(format!(
                "path data has {} entries, expected {} x {} x {}",
                data.len(),
                n_paths,
                grid.len(),
                dim
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return numerical("path bundle contains non-finite values");
        }
        Ok(PathBundle {
            grid,
            n_paths,
            dim,
            data,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(n_paths, T + 1, m)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_paths, self.grid.len(), self.dim)
    }

    pub fn value(&self, path: usize, k: usize, component: usize) -> f64 {
        self.data[(path * self.grid.len() + k) * self.dim + component]
    }

    /// All states of one path, time-major.
    pub fn path(&self, path: usize) -> &[f64] {
        let stride = self.grid.len() * self.dim;
        &self.data[path * stride..(path + 1) * stride]
    }

    /// First state component of one path, i.e. the path seen through `H`.
    pub fn projected(&self, path: usize) -> Vec<f64> {
        self.path(path).iter().step_by(self.dim).copied().collect()
    }

    /// Every path as a vector of its projected grid values.
    pub fn projected_all(&self) -> Vec<Vec<f64>> {
        (0..self.n_paths).map(|i| self.projected(i)).collect()
    }
}

/// Mean and covariance of one Euler-Maruyama transition:
/// `f_k + dt g(f_k, θ)` and `c(f_k, θ) c(f_k, θ)ᵀ dt`.
pub fn em_step_density_params<G, C>(
    drift: G,
    diffusion: C,
    f_k: &DVector<f64>,
    dt: f64,
    theta: &KernelHyperparams,
) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    G: Fn(&DVector<f64>, &KernelHyperparams) -> DVector<f64>,
    C: Fn(&DVector<f64>, &KernelHyperparams) -> DMatrix<f64>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return invalid(format!("step must be positive, got {dt}"));
    }
    let g = drift(f_k, theta);
    let c = diffusion(f_k, theta);
    if g.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return numerical("drift or diffusion returned a non-finite value");
    }
    let mean = f_k + g * dt;
    let cov = &c * c.transpose() * dt;
    Ok((mean, cov))
}

/// Drift `F f` of the linear prior SDE.
pub fn linear_drift(ssm: &StateSpaceModel) -> impl Fn(&DVector<f64>, &KernelHyperparams) -> DVector<f64> + '_ {
    move |f, _| &ssm.f * f
}

/// Diffusion `L √q` of the linear prior SDE.
pub fn linear_diffusion(ssm: &StateSpaceModel) -> impl Fn(&DVector<f64>, &KernelHyperparams) -> DMatrix<f64> + '_ {
    move |_, _| &ssm.l * ssm.q.sqrt()
}

fn lower_cholesky_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    // handles the rank-deficient L√q factor of m = 2 without jitter
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        let d = if d > 0.0 { d.sqrt() } else { 0.0 };
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s = m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = if d > 0.0 { s / d } else { 0.0 };
        }
    }
    l
}

/// Simulates `n` prior paths with Euler-Maruyama from `f_0 ~ N(0, P∞)`.
///
/// Path `i` draws from ChaCha stream `i` of `seed`.
pub fn simulate_prior(ssm: &StateSpaceModel, grid: &TimeGrid, n: usize, seed: u64) -> Result<PathBundle> {
    let m = ssm.dim();
    let init = lower_cholesky_psd(&ssm.p_inf);
    let drift = &ssm.f;
    let noise = &ssm.l * ssm.q.sqrt();
    let mut data = Vec::with_capacity(n * grid.len() * m);
    for i in 0..n {
        let mut rng = rng::stream(seed, i as u64);
        let z = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let mut f = &init * z;
        data.extend(f.iter());
        for k in 0..grid.steps() {
            let dt = grid.dt(k);
            let eps: f64 = StandardNormal.sample(&mut rng);
            f = &f + drift * &f * dt + &noise * (eps * dt.sqrt());
            data.extend(f.iter());
        }
    }
    PathBundle::new(grid.clone(), n, m, data)
}

pub(crate) fn gaussian_log_pdf_scalar(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

fn gaussian_log_pdf_dense(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>, step: usize) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| crate::Error::Numerical(format!("singular transition covariance at step {step}")))?;
    let r = x - mean;
    let solved = chol.solve(&r);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (r.dot(&solved) + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Log density of one path (time-major, `m` values per grid point) under the
/// discretized prior.
///
/// For `m = 1` every step is the Euler-Maruyama Gaussian. For `m = 2` every
/// step uses the exact transition `(A, Q)`.
pub fn em_log_density(ssm: &StateSpaceModel, path: &[f64], grid: &TimeGrid) -> Result<f64> {
    let m = ssm.dim();
    if path.len() != grid.len() * m {
        return invalid(format!(
            "path has {} values, grid of {} points with state dim {m} needs {}",
            path.len(),
            grid.len(),
            grid.len() * m
        ));
    }
    let state = |k: usize| DVector::from_column_slice(&path[k * m..(k + 1) * m]);
    let mut total = gaussian_log_pdf_dense(&state(0), &DVector::zeros(m), &ssm.p_inf, 0)?;
    for k in 0..grid.steps() {
        let dt = grid.dt(k);
        let f_k = state(k);
        let next = state(k + 1);
        total += if m == 1 {
            let mean = f_k[0] + dt * ssm.f[(0, 0)] * f_k[0];
            let var = ssm.q * ssm.l[(0, 0)].powi(2) * dt;
            if !(var > 0.0) {
                return numerical(format!("transition variance {var:e} at step {k}"));
            }
            gaussian_log_pdf_scalar(next[0], mean, var)
        } else {
            let (a, q) = discretize(ssm, dt)?;
            gaussian_log_pdf_dense(&next, &(a * f_k), &q, k)?
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelKind;
    use crate::ssm::build_ssm;

    fn ou(lambda: f64, s2: f64) -> (StateSpaceModel, KernelHyperparams) {
        let hp = KernelHyperparams::new(lambda, s2, 0.1).unwrap();
        (build_ssm(KernelKind::Exponential, &hp).unwrap(), hp)
    }

    #[test]
    fn step_params_direct_substitution() {
        let (ssm, hp) = ou(0.5, 1.0);
        let f = DVector::from_element(1, 1.0);
        let (mean, _) = em_step_density_params(linear_drift(&ssm), linear_diffusion(&ssm), &f, 0.1, &hp).unwrap();
        assert!((mean[0] - 0.95).abs() < 1e-15);
        // q = 2 with λ = 1, σ² = 1
        let (ssm, hp) = ou(1.0, 1.0);
        let (_, cov) = em_step_density_params(linear_drift(&ssm), linear_diffusion(&ssm), &f, 0.1, &hp).unwrap();
        assert!((cov[(0, 0)] - 0.2).abs() < 1e-15);
        let z = DVector::from_element(1, 0.0);
        let (mean, _) = em_step_density_params(linear_drift(&ssm), linear_diffusion(&ssm), &z, 1e-12, &hp).unwrap();
        assert!(mean[0].abs() < 1e-10);
        assert!(em_step_density_params(linear_drift(&ssm), linear_diffusion(&ssm), &f, 0.0, &hp).is_err());
        let bad = |_: &DVector<f64>, _: &KernelHyperparams| DVector::from_element(1, f64::NAN);
        assert!(em_step_density_params(bad, linear_diffusion(&ssm), &f, 0.1, &hp).is_err());
    }

    #[test]
    fn grid_construction() {
        let obs = Observations::new(vec![0.25, 0.5], vec![1.0, 2.0]).unwrap();
        let g = TimeGrid::with_observations(0.0, 1.0, 3, &obs).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.observation_positions(), vec![1, 3]);
        assert_eq!(g.observation_at(3), Some(1));
        assert_eq!(g.observation_at(2), None);
        assert!(TimeGrid::new(vec![0.0, 0.0]).is_err());
        assert!(TimeGrid::uniform(1.0, 0.0, 3).is_err());
    }

    #[test]
    fn simulation_is_deterministic_and_shaped() {
        let (ssm, _) = ou(1.0, 1.0);
        let grid = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
        let a = simulate_prior(&ssm, &grid, 1, 42).unwrap();
        assert_eq!(a, simulate_prior(&ssm, &grid, 1, 42).unwrap());
        assert_eq!(a.shape(), (1, 11, 1));
        let m32 = build_ssm(KernelKind::Matern32, &KernelHyperparams::new(1.0, 1.0, 0.1).unwrap()).unwrap();
        assert_eq!(simulate_prior(&m32, &grid, 3, 1).unwrap().shape(), (3, 11, 2));
    }

    #[test]
    fn single_step_log_density_by_hand() {
        let (ssm, _) = ou(0.8, 1.5);
        let grid = TimeGrid::new(vec![0.0, 0.3]).unwrap();
        let path = [0.4, 0.1];
        let q = 2.0 * 1.5 * 0.8;
        let init = -0.5 * (2.0 * std::f64::consts::PI * 1.5).ln() - 0.4 * 0.4 / (2.0 * 1.5);
        let mu = 0.4 - 0.8 * 0.4 * 0.3;
        let v = q * 0.3;
        let step = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (0.1 - mu) * (0.1 - mu) / (2.0 * v);
        let got = em_log_density(&ssm, &path, &grid).unwrap();
        assert!((got - (init + step)).abs() < 1e-12);
    }

    #[test]
    fn log_density_matches_product_of_gaussians() {
        let (ssm, _) = ou(1.3, 0.7);
        let grid = TimeGrid::new(vec![0.0, 0.1, 0.25, 0.4, 0.6, 0.7]).unwrap();
        let path = [0.2, 0.1, -0.3, 0.05, 0.4, 0.35];
        // product of densities, then log
        let pdf =
            |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let mut prod = pdf(path[0], 0.0, 0.7);
        for k in 0..5 {
            let dt = grid.dt(k);
            prod *= pdf(path[k + 1], path[k] * (1.0 - 1.3 * dt), 2.0 * 0.7 * 1.3 * dt);
        }
        assert!((em_log_density(&ssm, &path, &grid).unwrap() - prod.ln()).abs() < 1e-10);
    }

    #[test]
    fn noiseless_euler_path_is_a_local_maximum() {
        let (ssm, _) = ou(0.9, 1.0);
        let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let mut path = vec![0.7];
        for k in 0..8 {
            let f = path[k];
            path.push(f - 0.9 * f * grid.dt(k));
        }
        let base = em_log_density(&ssm, &path, &grid).unwrap();
        for k in 1..8 {
            for delta in [-0.05, -1e-3, 1e-3, 0.05] {
                let mut p = path.clone();
                p[k] += delta;
                assert!(em_log_density(&ssm, &p, &grid).unwrap() < base);
            }
        }
    }

    #[test]
    fn euler_transition_error_is_second_order() {
        let lambda = 1.3;
        let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|dt: &f64| (1.0 - lambda * dt - (-lambda * dt).exp()).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
        }
    }

    #[test]
    fn matern_log_density_uses_exact_transition() {
        let hp = KernelHyperparams::new(1.1, 0.9, 0.1).unwrap();
        let ssm = build_ssm(KernelKind::Matern32, &hp).unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        let bundle = simulate_prior(&ssm, &grid, 1, 9).unwrap();
        let lp = em_log_density(&ssm, bundle.path(0), &grid).unwrap();
        assert!(lp.is_finite());
        assert!(em_log_density(&ssm, &bundle.path(0)[..4], &grid).is_err());
    }
}
