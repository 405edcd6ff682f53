//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute. [`Tape::backward`]
//! walks the tape once in reverse and returns gradients for every trainable
//! leaf. Broadcasting is limited to a single-element right operand.

mod gradcheck;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use ops::{elementwise, log_softmax, matmul, softmax, stop_gradient, Elementwise, Operand};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
