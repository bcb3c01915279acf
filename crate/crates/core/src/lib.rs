//! Rank-1 fine-tuning of two-layer networks over Gaussian inputs.
//!
//! A pre-trained network `f(x) = sum_i lambda_i sigma(<w_i, x>)` is perturbed
//! by a rank-1 update `xi c u^T` of its first layer; a student recovers the
//! direction `u` by online SGD on the sphere. The crate provides:
//!
//! * [`hermite`]: Hermite coefficients of activations and Gaussian identities,
//! * [`network`]: base models, perturbations, teachers and named instances,
//! * [`population`]: the analytic drift function `h(m)`, the population
//!   gradient and loss, and Monte Carlo oracles for each,
//! * [`dynamics`]: sample gradients, the SGD loop, schedules and diagnostics,
//! * [`recovery`]: recovering the sign pattern `c` once `u` is learned,
//! * [`harness`]: experiment configuration, orchestration and persistence.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod hermite;
pub mod montecarlo;
pub mod network;
pub mod population;
pub mod recovery;
pub mod rng;

pub use error::{Error, Result};
