//! Companion-form SDE realizations of stationary kernels and their exact
//! linear-time posterior (Kalman filter + Rauch-Tung-Striebel smoother).

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numerical, Result};
use crate::gp::{symmetrize, KernelHyperparams, KernelKind, Observations};

/// Tolerance used when matching grid points to observation times.
pub const TIME_TOL: f64 = 1e-12;

/// `df = F f dt + L dβ`, with `E[dβ dβ] = q dt`, observed through `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub f: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub q: f64,
    pub h: DMatrix<f64>,
    /// Stationary state covariance.
    pub p_inf: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    /// `F P∞ + P∞ Fᵀ + q L Lᵀ`; zero for a consistent model.
    pub fn lyapunov_residual(&self) -> DMatrix<f64> {
        &self.f * &self.p_inf + &self.p_inf * self.f.transpose() + &self.l * self.l.transpose() * self.q
    }
}

/// Builds the state-space model whose stationary covariance is the kernel.
pub fn build_ssm(kind: KernelKind, hp: &KernelHyperparams) -> Result<StateSpaceModel> {
    hp.validate()?;
    let (lambda, s2) = (hp.lambda, hp.sigma2_k);
    Ok(match kind {
        KernelKind::Exponential => StateSpaceModel {
            f: DMatrix::from_element(1, 1, -lambda),
            l: DMatrix::from_element(1, 1, 1.0),
            q: 2.0 * s2 * lambda,
            h: DMatrix::from_element(1, 1, 1.0),
            p_inf: DMatrix::from_element(1, 1, s2),
        },
        KernelKind::Matern32 => {
            let kappa = 3f64.sqrt() * lambda;
            StateSpaceModel {
                f: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -kappa * kappa, -2.0 * kappa]),
                l: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
                q: 4.0 * kappa.powi(3) * s2,
                h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                p_inf: DMatrix::from_diagonal(&DVector::from_vec(vec![s2, kappa * kappa * s2])),
            }
        }
    })
}

/// Exact transition `(A, Q)` over a step of length `dt`.
pub fn discretize(ssm: &StateSpaceModel, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(dt.is_finite() && dt > 0.0) {
        return invalid(format!("step must be positive and finite, got {dt}"));
    }
    let a = (&ssm.f * dt).exp();
    let mut q = &ssm.p_inf - &a * &ssm.p_inf * a.transpose();
    symmetrize(&mut q);
    Ok((a, q))
}

/// Union of a uniform grid and the observation times, sorted, with points
/// closer than [`TIME_TOL`] merged.
pub fn merge_grid(uniform: &[f64], obs_times: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = uniform.iter().chain(obs_times).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for t in all {
        match out.last() {
            Some(&prev) if (t - prev).abs() <= TIME_TOL * prev.abs().max(1.0) => {}
            _ => out.push(t),
        }
    }
    out
}

/// Index of `t` in a sorted grid, within [`TIME_TOL`].
pub(crate) fn find_time(grid: &[f64], t: f64) -> Option<usize> {
    let idx = grid.partition_point(|&g| g < t - TIME_TOL * t.abs().max(1.0));
    (idx < grid.len() && (grid[idx] - t).abs() <= TIME_TOL * t.abs().max(1.0)).then_some(idx)
}

/// Filtered and smoothed state moments on a grid.
#[derive(Debug, Clone)]
pub struct KalmanResult {
    pub grid: Vec<f64>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
    /// Exact log marginal density of the observations.
    pub log_likelihood: f64,
}

impl KalmanResult {
    /// Smoothed mean of the latent function (first state component).
    pub fn mean(&self) -> Vec<f64> {
        self.smoothed_means.iter().map(|m| m[0]).collect()
    }

    /// Smoothed marginal variance of the latent function.
    pub fn variance(&self) -> Vec<f64> {
        self.smoothed_covs.iter().map(|p| p[(0, 0)]).collect()
    }
}

fn tidy_cov(p: &mut DMatrix<f64>, step: usize) -> Result<()> {
    symmetrize(p);
    for i in 0..p.nrows() {
        let d = p[(i, i)];
        if d < -1e-12 || !d.is_finite() {
            return numerical(format!("covariance diagonal {d:e} at grid index {step}"));
        }
        if d < 0.0 {
            p[(i, i)] = 0.0;
        }
    }
    Ok(())
}

fn solve_spd_or_pinv(p: &DMatrix<f64>) -> DMatrix<f64> {
    p.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| {
            p.clone()
                .pseudo_inverse(1e-14)
                .unwrap_or_else(|_| DMatrix::zeros(p.nrows(), p.ncols()))
        })
}

/// Kalman filter started at `N(0, P∞)` followed by an RTS pass.
///
/// `grid` must be strictly increasing and contain every observation time.
pub fn kalman_smooth(ssm: &StateSpaceModel, obs: &Observations, grid: &[f64], sigma2_y: f64) -> Result<KalmanResult> {
    if grid.is_empty() {
        return invalid("kalman_smooth needs a non-empty grid");
    }
    if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("grid must be finite and strictly increasing");
    }
    if !(sigma2_y.is_finite() && sigma2_y >= 0.0) {
        return invalid(format!("sigma2_y must be non-negative, got {sigma2_y}"));
    }
    let mut obs_at = vec![None; grid.len()];
    for (j, &tau) in obs.times().iter().enumerate() {
        let k = find_time(grid, tau)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("observation time {tau} is not on the grid")))?;
        obs_at[k] = Some(obs.values()[j]);
    }

    let n = grid.len();
    let m = ssm.dim();
    let h = &ssm.h;
    let mut filtered_means = Vec::with_capacity(n);
    let mut filtered_covs = Vec::with_capacity(n);
    let mut pred_means = Vec::with_capacity(n);
    let mut pred_covs = Vec::with_capacity(n);
    let mut transitions = Vec::with_capacity(n);
    let mut log_likelihood = 0.0;

    let mut mean = DVector::zeros(m);
    let mut cov = ssm.p_inf.clone();
    for k in 0..n {
        if k > 0 {
            let (a, q) = discretize(ssm, grid[k] - grid[k - 1])?;
            mean = &a * mean;
            cov = &a * cov * a.transpose() + q;
            tidy_cov(&mut cov, k)?;
            transitions.push(a);
        }
        pred_means.push(mean.clone());
        pred_covs.push(cov.clone());
        if let Some(y) = obs_at[k] {
            let s = (h * &cov * h.transpose())[(0, 0)] + sigma2_y;
            if !(s > 0.0) {
                return numerical(format!("innovation variance {s:e} at grid index {k}"));
            }
            let resid = y - (h * &mean)[0];
            let gain = &cov * h.transpose() / s;
            log_likelihood += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + resid * resid / s);
            mean += &gain * resid;
            cov -= &gain * s * gain.transpose();
            tidy_cov(&mut cov, k)?;
        }
        filtered_means.push(mean.clone());
        filtered_covs.push(cov.clone());
    }

    let mut smoothed_means = filtered_means.clone();
    let mut smoothed_covs = filtered_covs.clone();
    for k in (0..n - 1).rev() {
        let a = &transitions[k];
        let gain = &filtered_covs[k] * a.transpose() * solve_spd_or_pinv(&pred_covs[k + 1]);
        let mean = &filtered_means[k] + &gain * (&smoothed_means[k + 1] - &pred_means[k + 1]);
        let mut cov = &filtered_covs[k] + &gain * (&smoothed_covs[k + 1] - &pred_covs[k + 1]) * gain.transpose();
        tidy_cov(&mut cov, k)?;
        smoothed_means[k] = mean;
        smoothed_covs[k] = cov;
    }

    Ok(KalmanResult {
        grid: grid.to_vec(),
        filtered_means,
        filtered_covs,
        smoothed_means,
        smoothed_covs,
        log_likelihood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{gp_regress, gram_matrix};

    fn hp(lambda: f64, s2: f64) -> KernelHyperparams {
        KernelHyperparams::new(lambda, s2, 0.1).unwrap()
    }

    #[test]
    fn exponential_model() {
        let ssm = build_ssm(KernelKind::Exponential, &hp(1.0, 1.0)).unwrap();
        assert_eq!(ssm.f[(0, 0)], -1.0);
        assert_eq!(ssm.l[(0, 0)], 1.0);
        assert_eq!(ssm.q, 2.0);
        assert_eq!(ssm.p_inf[(0, 0)], 1.0);
        let ssm = build_ssm(KernelKind::Exponential, &hp(0.5, 2.0)).unwrap();
        assert_eq!(ssm.q, 2.0);
    }

    #[test]
    fn stationary_covariance_solves_lyapunov() {
        for kind in [KernelKind::Exponential, KernelKind::Matern32] {
            for (l, s) in [(0.3, 0.7), (1.0, 1.0), (2.5, 1.8)] {
                let ssm = build_ssm(kind, &hp(l, s)).unwrap();
                assert!(ssm.lyapunov_residual().amax() < 1e-8);
                assert_eq!(ssm.h[(0, 0)], 1.0);
            }
        }
    }

    #[test]
    fn scalar_discretization() {
        let ssm = build_ssm(KernelKind::Exponential, &hp(1.0, 1.0)).unwrap();
        let (a, q) = discretize(&ssm, 2f64.ln()).unwrap();
        assert!((a[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((q[(0, 0)] - 0.75).abs() < 1e-14);
        let (a, q) = discretize(&ssm, 1e-12).unwrap();
        assert!((a[(0, 0)] - 1.0).abs() < 1e-9 && q[(0, 0)].abs() < 1e-9);
        assert!(discretize(&ssm, 0.0).is_err());
        assert!(discretize(&ssm, -1.0).is_err());
    }

    #[test]
    fn merge_grid_dedups() {
        let g = merge_grid(&[0.0, 1.0, 2.0], &[1.0 + 1e-14, 1.5]);
        assert_eq!(g, vec![0.0, 1.0, 1.5, 2.0]);
        assert_eq!(find_time(&g, 1.5), Some(2));
        assert_eq!(find_time(&g, 1.4), None);
    }

    #[test]
    fn prior_recovery_without_observations() {
        let grid: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        for kind in [KernelKind::Exponential, KernelKind::Matern32] {
            let ssm = build_ssm(kind, &hp(1.2, 0.8)).unwrap();
            let res = kalman_smooth(&ssm, &Observations::empty(), &grid, 0.1).unwrap();
            for (m, v) in res.mean().iter().zip(res.variance()) {
                assert_eq!(*m, 0.0);
                assert!((v - 0.8).abs() < 1e-12);
            }
            assert_eq!(res.log_likelihood, 0.0);
        }
    }

    #[test]
    fn observation_off_grid_is_rejected() {
        let ssm = build_ssm(KernelKind::Exponential, &hp(1.0, 1.0)).unwrap();
        let obs = Observations::new(vec![0.55], vec![1.0]).unwrap();
        assert!(kalman_smooth(&ssm, &obs, &[0.0, 0.5, 1.0], 0.1).is_err());
    }

    #[test]
    fn smoother_matches_batch_regression_and_evidence() {
        let h = hp(0.9, 1.3);
        let obs = Observations::new(vec![0.4, 1.3, 2.2, 4.0], vec![0.3, -0.8, 0.1, 1.2]).unwrap();
        let uniform: Vec<f64> = (0..=50).map(|i| i as f64 * 0.1).collect();
        let grid = merge_grid(&uniform, obs.times());
        for kind in [KernelKind::Exponential, KernelKind::Matern32] {
            let ssm = build_ssm(kind, &h).unwrap();
            let res = kalman_smooth(&ssm, &obs, &grid, h.sigma2_y).unwrap();
            let post = gp_regress(kind, &h, &obs, &grid).unwrap();
            for k in 0..grid.len() {
                assert!((res.mean()[k] - post.mean[k]).abs() < 1e-6);
                assert!((res.variance()[k] - post.cov[(k, k)]).abs() < 1e-6);
            }
            // dense Gaussian log marginal
            let mut c = gram_matrix(kind, &h, obs.times(), obs.times()).unwrap();
            c += DMatrix::identity(obs.len(), obs.len()) * h.sigma2_y;
            let y = DVector::from_column_slice(obs.values());
            let quad = (y.transpose() * c.clone().try_inverse().unwrap() * &y)[0];
            let dense = -0.5 * (quad + c.determinant().ln() + obs.len() as f64 * (2.0 * std::f64::consts::PI).ln());
            assert!((res.log_likelihood - dense).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_never_increases_variance() {
        let h = hp(1.7, 0.6);
        let obs = Observations::new(vec![0.5, 1.0, 3.0], vec![0.2, 0.4, -0.3]).unwrap();
        let grid = merge_grid(&(0..=40).map(|i| i as f64 * 0.1).collect::<Vec<_>>(), obs.times());
        for kind in [KernelKind::Exponential, KernelKind::Matern32] {
            let ssm = build_ssm(kind, &h).unwrap();
            let res = kalman_smooth(&ssm, &obs, &grid, 0.05).unwrap();
            for k in 0..grid.len() {
                assert!(res.smoothed_covs[k][(0, 0)] <= res.filtered_covs[k][(0, 0)] + 1e-10);
            }
        }
    }
}
