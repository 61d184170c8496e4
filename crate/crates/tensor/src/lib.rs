//! Reverse-mode tensor engine: a recording [`Tape`] of `f64` tensors with
//! the handful of differentiable primitives a slice-encoder/ConvLSTM network
//! needs, an [`AdamState`] optimizer, finite-difference checking and a
//! binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{decayed_lr, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{sigmoid, softmax, Gradients, Tape, Var};
pub use tensor::Tensor;
