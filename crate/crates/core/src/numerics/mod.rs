//! Dense tensor arithmetic with tape-based reverse-mode differentiation.

mod gemm;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;

pub use optim::{AdamW, AdamWConfig, CosineSchedule, Parameter};
pub use tensor::{no_grad, Tensor};
