//! Vision Transformers whose attention applies an activation (GELU or a
//! SwiGLU gate) to the value tensor, in Pre-LN, Post-LN, and parallel block
//! layouts, together with residual-stream collapse diagnostics, a synthetic
//! dataset format, and a small training harness.
//!
//! All math runs on [`mabvit_tensor::Tensor`] in `f64`.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
mod error;
pub mod harness;
pub mod layers;
pub mod model;

pub use error::{Error, Result};
pub use mabvit_tensor::{self as tensor, Tensor};
