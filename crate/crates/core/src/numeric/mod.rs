//! Dense tensors and reverse-mode differentiation.

pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use ops::{softmax_row_into, softmax_row_vjp, Mask, LAYERNORM_EPS};
pub use scalar::{DType, Scalar};
pub use tape::{Backward, BackwardCtx, Grads, Tape, Var};
pub use tensor::Tensor;
