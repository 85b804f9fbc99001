//! Lazy Attention in a toy autoregressive language model.
//!
//! Attention scores combine RoPE with learnable per-head distance biases,
//! and rows are normalized with Elastic-Softmax, `ReLU(softmax(s) + τ/i)`,
//! which lets a head put exactly zero weight on every key. The crate holds
//! the tensor engine, the mechanism, a byte-level transformer, its training
//! loop and the diagnostics (density, sink ratio, repeated-token probe,
//! per-position statistics, length extrapolation).

pub mod attention;
pub mod capture;
pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod normalizer;
pub mod numeric;
pub mod par;
pub mod positional;
pub mod training;

pub use error::{Error, Result};
