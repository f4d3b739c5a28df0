//! Bayesian neural networks trained by variational inference with a
//! tridiagonal-covariance Gaussian posterior per parameter block.
//!
//! Module map:
//!
//! * [`corrgauss`]: the variational family (factor recursion, sampling, KL,
//!   analytic derivatives, numerical safeguards).
//! * [`layers`]: dense / convolution / activation / pooling layers with
//!   frequentist and Bayesian parameter stores.
//! * [`net`]: network container, mini-batch objective, SGD with momentum,
//!   training loop and checkpoints.
//! * [`predict`]: posterior predictive estimation, credible intervals and
//!   certainty classification.
//! * [`data`]: MNIST IDX / CIFAR-10 binary loaders, synthetic blobs, batching.
//! * [`verify`]: independent numerical oracles.
//! * [`config`] and [`cli`]: run configuration files and command implementations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod corrgauss;
pub mod data;
pub mod error;
pub mod layers;
pub mod net;
pub mod predict;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
