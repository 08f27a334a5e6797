//! Desk-scale laboratory for loss-driven domain adaptation on synthetic
//! pixel-labeling tasks.
//!
//! The crate is organized around five pieces:
//!
//! - [`loss`] — the Conservative Loss family (cross entropy, focal, the
//!   log-based conservative form and its cubic relatives) as pure scalar
//!   functions of the ground-truth-class probability, with analytic
//!   gradients and the sign-switching update rule.
//! - [`nn`] — a minimal deterministic network engine: dense and 3x3
//!   convolution layers, manual backpropagation, Adam, finite-difference
//!   gradient checking and a binary checkpoint format.
//! - [`data`] — seeded generators for paired source/target segmentation
//!   datasets with a controllable affine feature shift.
//! - [`engine`] — the encoder/generator/discriminator/classifier training
//!   loop with alternating updates, warm/cold start schedules and run
//!   history recording.
//! - [`metrics`] — confusion-matrix accumulation and mean IoU.
//!
//! Everything is deterministic given its seeds: reruns produce bit-identical
//! histories, datasets and checkpoints.

pub mod data;
pub mod engine;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
