//! Attention-based single-object visual tracking.
//!
//! The crate is a self-contained stack: an n-dimensional tensor type with
//! reverse-mode automatic differentiation, a convolutional backbone, a
//! feature-fusion network built from self- and cross-attention layers,
//! prediction heads, training losses, an online tracker with a multi-slot
//! template bank, an optional segmentation branch, and a command-line
//! harness for training, tracking, and evaluation on synthetic sequences.
//!
//! Everything runs on the CPU. The default scalar type is `f64`; enabling
//! the `real32` feature switches to `f32` and relaxes test tolerances.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod heads;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod profile;
pub mod segmentation;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod vis;

#[cfg(doctest)]
mod booktests;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
