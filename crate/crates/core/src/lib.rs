//! Temporal-granularity anomaly detection for surveillance video.
//!
//! Per-segment chunk features at three temporal granularities are fused
//! with cross- and self-attention, scored by a small classifier and trained
//! with a top-k feature-magnitude MIL objective. The crate also covers
//! evaluation metrics and a streaming scorer that posts anomaly packets.

mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod granularity;
pub mod loss;
pub mod model;
pub mod serve;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
