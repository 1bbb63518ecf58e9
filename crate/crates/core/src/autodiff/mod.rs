//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod attention;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use attention::AttentionWeights;
pub use gradcheck::{grad_check, FD_STEP};
pub use tape::{Tape, Var};
