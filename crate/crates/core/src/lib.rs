//! Gaussian process regression through its stochastic differential equation
//! representation.
//!
//! * [`gp`]: dense GP regression, the exact reference.
//! * [`ssm`]: state-space form of Matérn kernels and Kalman/RTS smoothing.
//! * [`sde`]: time grids, Euler–Maruyama prior simulation and path densities.
//! * [`autodiff`]: a small reverse-mode tape.
//! * [`vb`]: variational Brownian bridges driven by a recurrent network.
//! * [`criticism`]: MMD two-sample tests between path samples.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod criticism;
mod error;
pub mod gp;
pub mod rng;
pub mod sde;
pub mod ssm;
pub mod vb;

pub use criticism::{mmd_test, MmdReport};
pub use error::{Error, Result};
pub use gp::{
    fit_hyperparams, gp_regress, gp_sample, GpPosterior, KernelHyperparams, KernelKind, LogNormalPrior, Observations,
};
pub use sde::{PathBundle, TimeGrid};
pub use ssm::{build_ssm, kalman_smooth, KalmanResult, StateSpaceModel};
pub use vb::{Checkpoint, ElboProblem, Likelihood, TrainConfig, VariationalParams};
