//! Patch-level forensic signatures scored with a deep-kernel maximum mean
//! discrepancy.
//!
//! The pipeline has four stages:
//!
//! 1. [`embeddings`] holds per-image patch embedding fields and the `.pfse`
//!    file format they are exchanged in.
//! 2. [`pfs`] projects every patch through a small learnable network into a
//!    bounded signature space and trains that network, together with the
//!    kernel bandwidth, by ascending the regularized test-power objective in
//!    [`kernel_mmd`].
//! 3. [`detect`] scores a single image by the biased MMD between its
//!    signature field and a bank of real reference fields.
//! 4. [`metrics`] evaluates scores; [`baselines`] provides patch-voting and
//!    pooled-logit alternatives for comparison.
//!
//! [`synth`] generates sparse-defect data so every stage runs without a vision
//! backbone, and [`theory`] checks the closed-form and scaling predictions
//! against Monte-Carlo estimates. [`experiment`] wires the stages into the
//! reference end-to-end run.
//!
//! With the `parallel` feature (on by default) the data-parallel loops run on
//! rayon. Every reduction is index-ordered, so results are bit-identical to the
//! sequential build regardless of thread count.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod detect;
pub mod embeddings;
mod error;
pub mod experiment;
pub mod kernel_mmd;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod pfs;
pub mod rng;
pub mod synth;
pub mod theory;

pub use embeddings::{EmbeddingDataset, Label, PatchEmbeddingField, TokenGrid};
pub use error::{Error, Result};
pub use pfs::{PfsField, PfsParams, TrainConfig};
