//! Multi-modal video transformer over compressed-domain clips.
//!
//! The crate covers the whole pipeline at desk scale: a small
//! reverse-mode tensor engine ([`tensor`]), tokenization of I-frames,
//! motion vectors, residuals and audio ([`tokenize`]), scoped and
//! cross-modal attention ([`attention`]), the four model variants with a
//! FLOP/parameter accountant ([`model`]), a synthetic dataset generator
//! ([`datagen`]) and the training / ablation / rollout harness
//! ([`harness`]).

pub mod attention;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod tokenize;

pub use error::{Error, Result};
