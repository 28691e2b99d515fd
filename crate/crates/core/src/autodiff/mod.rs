//! Minimal reverse-mode automatic differentiation over dense rank-1..3
//! tensors of 64-bit reals, with finite-difference verification.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Gradients, OpKind, Tape, Var, MASKED_SCORE};
pub use tensor::Tensor;
