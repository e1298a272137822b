//! A self-contained CNN training engine built around vector-capsule
//! classification heads.
//!
//! The crate provides, from the bottom up:
//!
//! - [`tensor`]: dense row-major arrays with deterministic kernels and a
//!   seeded random source ([`rng`]);
//! - [`autodiff`]: a dynamic reverse-mode tape plus a finite-difference
//!   gradient-check oracle;
//! - [`layers`]: valid-padding convolution, 2x2 max pooling, batch
//!   normalization, and dense layers;
//! - [`capsule`]: feature-map-to-capsule reshaping, the Hadamard-product
//!   vector-capsule head and its two matrix-capsule baselines, norm readout,
//!   and exact parameter/operation counting;
//! - [`optim`]: RMSProp and Adam with their distinct epsilon placements,
//!   staircase learning-rate schedules, and the four standard presets;
//! - [`data`]: IDX dataset IO, a synthetic dataset generator, seeded
//!   batching and augmentation;
//! - [`model`] / [`trainer`]: model assembly, the training loop, EMA weight
//!   tracking, evaluation, and checkpoints;
//! - [`cli`]: the `hvcnet` command-line front end.

pub mod autodiff;
pub mod capsule;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
