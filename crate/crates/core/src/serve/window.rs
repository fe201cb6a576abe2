use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{FeatureVolume, SEGMENTS};
use crate::model::{score_volume, SegmentScores, TeGConfig, TeGParams};
use crate::tensor::Tensor;

/// Features of one segment at the three granularities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFeatures {
    pub short: Vec<f64>,
    pub medium: Vec<f64>,
    pub long: Vec<f64>,
}

impl SegmentFeatures {
    fn width(&self) -> Result<usize> {
        let d = self.short.len();
        if self.medium.len() != d || self.long.len() != d {
            return Err(Error::contract(format!(
                "granularity widths differ: {}, {}, {}",
                d,
                self.medium.len(),
                self.long.len()
            )));
        }
        Ok(d)
    }
}

/// The most recent segments of one camera, oldest first.
#[derive(Debug, Clone)]
pub struct StreamWindow {
    camera_id: String,
    capacity: usize,
    entries: VecDeque<(u64, SegmentFeatures)>,
}

/// Scores of the real (non-tiled) window positions.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub timestamps: Vec<u64>,
    pub scores: SegmentScores,
}

impl WindowScores {
    /// Score of the segment that arrived last.
    pub fn newest(&self) -> f64 {
        *self.scores.scores.last().expect("window is never empty after a push")
    }
}

impl StreamWindow {
    pub fn new(camera_id: impl Into<String>) -> Self {
        Self::with_capacity(camera_id, SEGMENTS)
    }

    pub fn with_capacity(camera_id: impl Into<String>, capacity: usize) -> Self {
        Self {
            camera_id: camera_id.into(),
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn camera_id(&self) -> &str {
        &self.camera_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<u64> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    /// Appends a segment, evicting the oldest beyond capacity.
    pub fn append(&mut self, features: SegmentFeatures, timestamp_ms: u64) -> Result<()> {
        let d = features.width()?;
        if let Some((last, f)) = self.entries.back() {
            if timestamp_ms <= *last {
                return Err(Error::contract(format!(
                    "camera {}: timestamp {timestamp_ms} not after {last}",
                    self.camera_id
                )));
            }
            if f.short.len() != d {
                return Err(Error::contract(format!(
                    "camera {}: width {d} after width {}",
                    self.camera_id,
                    f.short.len()
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((timestamp_ms, features));
        Ok(())
    }

    /// Window contents tiled cyclically up to `capacity` rows.
    pub fn tiled_volume(&self) -> Result<FeatureVolume> {
        if self.entries.is_empty() {
            return Err(Error::contract("empty window"));
        }
        let d = self.entries[0].1.short.len();
        let n = self.entries.len();
        let mut mats = [Vec::new(), Vec::new(), Vec::new()];
        for row in 0..self.capacity {
            let f = &self.entries[row % n].1;
            mats[0].extend_from_slice(&f.short);
            mats[1].extend_from_slice(&f.medium);
            mats[2].extend_from_slice(&f.long);
        }
        let [s, m, l] = mats.map(|m| Tensor::matrix(self.capacity, d, m));
        FeatureVolume::new(self.camera_id.clone(), s?, m?, l?)
    }

    /// Appends a segment and rescores the whole window.
    pub fn push_segment(
        &mut self,
        features: SegmentFeatures,
        timestamp_ms: u64,
        params: &TeGParams,
        config: &TeGConfig,
    ) -> Result<WindowScores> {
        let d = features.width()?;
        if d != config.dim {
            return Err(Error::contract(format!(
                "camera {}: segment width {d}, model expects {}",
                self.camera_id, config.dim
            )));
        }
        self.append(features, timestamp_ms)?;
        let volume = self.tiled_volume()?;
        let mut scores = score_volume(&volume, params, config)?;
        scores.scores.truncate(self.entries.len());
        Ok(WindowScores {
            timestamps: self.timestamps(),
            scores,
        })
    }
}
