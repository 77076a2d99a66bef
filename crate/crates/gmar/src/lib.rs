//! Gradient-weighted multi-head attention rollout for Vision Transformers.
//!
//! The crate builds the whole pipeline at desk scale:
//!
//! - [`tensor`] — dense `f64` tensors with a reverse-mode gradient tape;
//! - [`vit`] — a configurable ViT whose forward pass captures every
//!   attention probability tensor and whose backward pass extracts their
//!   gradients for a chosen class logit;
//! - [`attribution`] — attention rollout, gradient-based head weights
//!   (L1/L2), the weighted rollout with residual strength `alpha`,
//!   Grad-CAM-style and random baselines, and difference maps;
//! - [`metrics`] — Average Drop, Average Increase, and Insertion/Deletion
//!   AUC over patch-level perturbations;
//! - [`io`] — PPM images, synthetic datasets, weight serialization, and
//!   heatmap rendering;
//! - [`train`] — a deterministic Adam trainer for the toy model;
//! - [`cli`] — the `gmar` command-line entry point.
//!
//! Start with the runnable programs in `examples/` for end-to-end usage.

pub mod attribution;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{ops, GradientStore, Tape, Tensor};
