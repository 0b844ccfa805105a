//! Convolutional Gaussian process classifiers with translation-insensitive
//! kernels, trained by doubly stochastic sparse variational inference with
//! inter-domain inducing patches.
//!
//! The crate is organized bottom-up: a small fp64 reverse-mode autodiff
//! engine ([`tensor`]), constrained parameters ([`param`]), covariance
//! functions ([`kernels`]), the sparse variational layer ([`layer`]),
//! stacked deep models and their training objective ([`model`]), and the
//! surrounding training/data/metrics/CLI machinery.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod inducing;
pub mod kernels;
pub mod layer;
pub mod likelihood;
mod linalg;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod param;
pub mod tensor;
pub mod testing;
pub mod train;

pub mod cli;

pub use error::{Error, Result};
pub use tensor::{backward, Gradients, Tensor};

/// Default diagonal jitter for covariance factorizations.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Jitter escalation ceiling; factorizations that still fail here error out.
pub const MAX_JITTER: f64 = 1e-2;
