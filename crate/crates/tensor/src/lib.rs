//! Dense row-major `f64` tensors with a dynamically recorded graph and
//! reverse-mode differentiation, sized to what a small Vision Transformer
//! needs, plus a finite-difference gradient checker.
//!
//! ```
//! use mabvit_tensor::Tensor;
//!
//! let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```

mod alloc;
mod backward;
mod error;
mod gradcheck;
mod kernels;
mod op;
mod ops;
mod tensor;

pub use alloc::retain_heap_memory;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradReport, ParamGradError, ABS_FLOOR};
pub use tensor::{is_grad_enabled, no_grad, Tensor};
