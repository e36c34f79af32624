//! Desk-scale mask-conditioned grayscale volume synthesis.
//!
//! The crate trains and runs a conditional adversarial model that turns
//! per-slice semantic label maps into grayscale image volumes. Everything
//! is built on a small reverse-mode autodiff core:
//!
//! - [`tensor`] — dense `f64` tensors, differentiable ops, gradient checking;
//! - [`fusion`] — slice-graph construction, edge attention, multi-scale
//!   dilated aggregation, and graph feature mixing across slices;
//! - [`noise`] — smoothed 3-D noise fields, per-slice chunking, and gated
//!   feature-map injection;
//! - [`texture`] — differentiable texture/gray-statistics scoring of images
//!   against class masks, and the score-difference loss built on it;
//! - [`model`] — generator, multi-scale conditional discriminator,
//!   perceptual feature stack, and the composite training losses;
//! - [`metrics`] — PSNR / SSIM / perceptual distance and paired-set reports;
//! - [`phantom`] — deterministic synthetic labeled volumes, augmentation,
//!   and dataset splits;
//! - [`volume`] — binary volume/mask file format and PGM previews;
//! - [`config`], [`checkpoint`], [`optim`], [`train`] — run configuration,
//!   bit-exact checkpointing, Adam, and the training loop;
//! - [`gradcheck`] — named finite-difference suites used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod texture;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
