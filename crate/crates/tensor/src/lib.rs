//! Dense NCHW tensors with tape-based reverse-mode differentiation.
//!
//! Ops are recorded on a [`Tape`] as they execute; [`Tape::backward`] replays
//! them in reverse. Reductions use a fixed pairwise order so identical inputs
//! give bit-identical results.

#![allow(clippy::should_implement_trait)]

mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use element::{gemm, pairwise_sum, pairwise_sum_by, Element, Layout};
pub use error::{Result, TensorError};
pub use gradcheck::{compare_gradient, grad_check, gradient, GradCheck};
pub use ops::{conv_output_size, conv_transpose_output_size, Axis, Mode, RunningStats};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
