//! Data association with Gaussian processes.
//!
//! This crate implements a mixture of K independent (sparse variational)
//! Gaussian processes in which every observation is explained by exactly one
//! of the K latent functions. Which function is responsible at a given input
//! is itself modelled with GPs: K assignment processes are pushed through a
//! softmax to give input-dependent mixture weights. Everything — kernel
//! hyperparameters, inducing points, variational posteriors, per-point
//! assignment beliefs and likelihood noises — is trained jointly by stochastic
//! gradient ascent on a single evidence lower bound that factorizes over data
//! points, using reparametrized samples for the latent functions and a
//! temperature-controlled concrete relaxation for the discrete assignments.
//!
//! The crate is organized bottom-up:
//!
//! * [`math`] — dense row-major matrices, Cholesky factorization with a
//!   jitter schedule, triangular solves, and seeded random streams.
//! * [`kernels`] — squared-exponential (ARD) and white-noise covariance
//!   functions with softplus-constrained hyperparameters.
//! * [`tape`] — a small matrix-valued reverse-mode differentiation tape; all
//!   training gradients are pathwise derivatives recorded through it.
//! * [`gp`] — a sparse variational GP layer (inducing points, marginal
//!   posterior, KL to prior, reparametrized sampling) and deep stacks of them.
//! * [`assignment`] — softmax utilities, concrete-relaxation sampling and the
//!   per-point assignment beliefs.
//! * [`model`] — the assembled mixture model, its minibatch bound, the
//!   predictive mixture and snapshot (de)serialization.
//! * [`train`] — flat parameter vectors, Adam, temperature schedule and the
//!   training loop.
//! * [`experiments`] — benchmark data generators (noise separation,
//!   multimodal regression, mixed cart-pole systems), metrics and a single
//!   process baseline.
//!
//! With the default `parallel` feature the batch-level linear algebra and the
//! per-point prediction loops are data-parallel via rayon; reductions keep a
//! fixed order so results are bitwise identical to the sequential fallback
//! (build with `--no-default-features` to get the purely sequential version).

pub mod assignment;
pub mod error;
pub(crate) mod exec;
pub mod experiments;
pub mod gp;
pub mod kernels;
pub mod math;
pub mod model;
pub mod tape;
pub mod train;

pub use error::Error;
pub use math::{DenseMatrix, RngStream};
