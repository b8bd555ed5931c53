//! Dense tensors, reverse-mode differentiation, and gradient verification.

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, DEFAULT_STEP};
pub use ops::{conv2d, layer_norm, log_softmax, softmax, LAYER_NORM_EPS};
pub use scalar::{DType, Scalar};
pub use tape::{BatchStats, Grads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tape_tests;
