//! Convolutional GAN toolkit for synthetic location trajectories.
//!
//! The pipeline has four stages:
//!
//! * [`data`] loads raw trajectory files, clips them to a bounding box and
//!   splits them into cross-validation folds.
//! * [`codec`] turns a trajectory into a fixed-size multi-channel grid
//!   (min-max normalised, row-major, zero post-padded with a validity mask),
//!   replicates every cell into a 2x2 block, and reverses all of it.
//! * [`tensor`] and [`gan`] provide a small CPU tensor engine with analytic
//!   backward passes and a DCGAN-shaped generator/discriminator pair, trained
//!   with adversarial, WGAN or WGAN-LP losses. [`dp`] adds DP-SGD (per-sample
//!   clipping, Gaussian noise, Renyi accounting).
//! * [`metrics`] compares generated and real datasets with the Hausdorff
//!   distance, sliced Wasserstein distance, travelled-distance Wasserstein and
//!   time reversal ratio.
//!
//! [`experiment`] ties the stages together into reproducible k-fold runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod data;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod gan;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
