//! Weakly supervised semantic segmentation with self-correcting soft labels.
//!
//! The crate trains an image-only primary segmentation model from a small
//! fully supervised set plus a larger set annotated only with bounding boxes.
//! A box-conditioned ancillary model produces soft labels for the weak set,
//! and a self-correction step (linear logit fusion or a small trainable conv
//! head) refines those labels as the primary model improves.
//!
//! Modules, bottom to top:
//! - [`tensor`], [`ops`], [`graph`]: dense f64 tensors with reverse-mode
//!   autodiff over the handful of ops the models need.
//! - [`dist`]: factorial per-pixel label distributions, KL divergence, and
//!   the weighted geometric-mean fusion of primary and ancillary logits.
//! - [`boxes`], [`models`]: box mask rasterization and the three networks
//!   (primary, box-attention ancillary, conv self-correction head).
//! - [`selfcorrect`]: target-distribution strategies, the alpha schedule,
//!   and the training losses.
//! - [`data`]: synthetic shape scenes, dataset splits, label-noise
//!   injection, and the on-disk dataset format.
//! - [`train`], [`eval`], [`experiment`]: optimization loops, mIOU
//!   evaluation, and the benchmark grid runner.
//! - [`gradcheck`]: finite-difference verification of every registered op
//!   and composed loss.

pub mod boxes;
pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod ops;
pub mod params;
pub mod seeding;
pub mod selfcorrect;
pub mod tensor;
pub mod train;

pub use boxes::{boxes_to_mask, BoxAnnotation, BoxMaskTensor};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::ParamSet;
pub use tensor::{Dtype, Tensor};
