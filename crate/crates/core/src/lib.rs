//! Multi-scale window attention.
//!
//! Window planning across heads and layers, reference attention kernels
//! (full causal, sliding window, Taylor-feature linear), an incremental decoder
//! with per-head ring-buffer caches, an exact cost model, and a small byte-level
//! language-model harness tying them together.

pub mod attention;
pub mod cost;
pub mod decode;
pub mod error;
pub mod model;
pub mod numerics;
pub mod plan;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::Tensor;
