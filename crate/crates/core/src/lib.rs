//! RAW-domain face detection: sensor-data synthesis, quantization-aware
//! training down to ternary weights, BN folding and integer inference.

// Validation uses `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod quant;
pub mod rawsim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
