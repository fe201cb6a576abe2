use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Processing time per segment against the segment's own duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBudget {
    pub per_granularity_feature_ms: f64,
    pub granularity_count: usize,
    pub fusion_ms: f64,
    pub segment_ms: f64,
    pub total_ms: f64,
    /// Percentage of `segment_ms` spent processing.
    pub fraction_of_segment: f64,
}

impl LatencyBudget {
    pub fn is_real_time(&self) -> bool {
        self.total_ms <= self.segment_ms
    }
}

pub fn latency_report(
    per_granularity_feature_ms: f64,
    granularity_count: usize,
    fusion_ms: f64,
    segment_ms: f64,
) -> Result<LatencyBudget> {
    if !(segment_ms > 0.0 && segment_ms.is_finite()) {
        return Err(Error::contract(format!("segment duration {segment_ms} ms must be positive")));
    }
    if !(per_granularity_feature_ms >= 0.0 && fusion_ms >= 0.0) || granularity_count == 0 {
        return Err(Error::contract("timings must be non-negative with at least one granularity"));
    }
    let total_ms = per_granularity_feature_ms * granularity_count as f64 + fusion_ms;
    Ok(LatencyBudget {
        per_granularity_feature_ms,
        granularity_count,
        fusion_ms,
        segment_ms,
        total_ms,
        fraction_of_segment: 100.0 * total_ms / segment_ms,
    })
}
