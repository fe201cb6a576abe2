use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// JSON schema every serialized packet validates against.
pub const PACKET_SCHEMA: &str = include_str!("../../schema/anomaly_packet.schema.json");

/// Type emitted when no class mapping is configured.
pub const DEFAULT_ANOMALY_TYPE: &str = "anomaly";

/// Wire format of one detected event. Field order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyPacket {
    pub anomaly_type: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub camera_id: String,
    pub peak_score: f64,
    pub clip_ref: String,
}

impl AnomalyPacket {
    pub fn new(anomaly_type: &str, camera_id: &str, start_ms: u64, end_ms: u64, peak_score: f64) -> Result<Self> {
        let p = Self {
            anomaly_type: anomaly_type.to_string(),
            start_ms,
            end_ms,
            camera_id: camera_id.to_string(),
            peak_score,
            clip_ref: clip_ref(camera_id, start_ms, end_ms),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_ms > self.end_ms {
            return Err(Error::contract(format!(
                "packet starts at {} after it ends at {}",
                self.start_ms, self.end_ms
            )));
        }
        if !(0.0..=1.0).contains(&self.peak_score) {
            return Err(Error::contract(format!("peak score {} outside [0, 1]", self.peak_score)));
        }
        if self.anomaly_type.is_empty() || self.camera_id.is_empty() {
            return Err(Error::contract("packet type and camera must be non-empty"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("packet serializes")
    }
}

/// Placeholder reference to the clip covering an event.
pub fn clip_ref(camera_id: &str, start_ms: u64, end_ms: u64) -> String {
    format!("clip://{camera_id}/{start_ms}-{end_ms}")
}
