//! petrolens: train and explain image classifiers for thin-section-style imagery.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff tensor
//! core, ResNet-18 and ViT reference architectures, a synthetic corpus
//! generator with pixel-exact ground-truth masks, a training/evaluation
//! harness, and gradient- and attention-based explanation operators
//! (Guided Grad-CAM, per-head attention maps).
//!
//! Start with the [`guide`] module (the rendered book lives in `book/`), or
//! jump straight to [`tensor`] for the autodiff core and [`model`] for the
//! architectures.

pub mod cli;
pub mod config;
pub mod data;
pub mod explain;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError};
