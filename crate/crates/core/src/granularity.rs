//! Video → segments → chunks → per-segment feature rows.
//!
//! A video of `N` frames is cut into 32 segments using the floor partition
//! `[⌊i·N/32⌋, ⌊(i+1)·N/32⌋)`. Each segment is cut into chunks of `G` frames
//! for every granularity, the provider embeds each chunk, and the chunk
//! embeddings are averaged into one row per segment.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SEGMENTS: usize = 32;

/// Short, medium and long chunk lengths in frames.
pub const DEFAULT_GRANULARITIES: [usize; 3] = [8, 32, 64];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub segment_length: usize,
    pub granularity: usize,
    pub chunk_ranges: Vec<Range<usize>>,
}

/// Splits `[0, segment_length)` into chunks of `granularity` frames.
///
/// A remainder shorter than one chunk is absorbed into the last chunk; a
/// granularity longer than the segment yields a single chunk.
pub fn plan_chunks(segment_length: usize, granularity: usize) -> Result<GranularitySpec> {
    if segment_length == 0 || granularity == 0 {
        return Err(Error::contract(format!(
            "plan_chunks needs positive lengths (L={segment_length}, G={granularity})"
        )));
    }
    let count = (segment_length / granularity).max(1);
    let mut chunk_ranges: Vec<Range<usize>> = (0..count)
        .map(|j| j * granularity..(j + 1) * granularity)
        .collect();
    if let Some(last) = chunk_ranges.last_mut() {
        last.end = segment_length;
    }
    Ok(GranularitySpec {
        segment_length,
        granularity,
        chunk_ranges,
    })
}

/// Arithmetic mean of equally sized feature vectors.
pub fn aggregate_segment(chunk_features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = chunk_features
        .first()
        .ok_or_else(|| Error::contract("cannot aggregate an empty chunk list"))?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for (j, c) in chunk_features.iter().enumerate() {
        if c.len() != dim {
            return Err(Error::contract(format!(
                "chunk {j} has width {}, expected {dim}",
                c.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let n = chunk_features.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Frame range of segment `i` out of `segments` for a video of `frames` frames.
pub fn segment_range(i: usize, segments: usize, frames: usize) -> Range<usize> {
    (i * frames / segments)..((i + 1) * frames / segments)
}

/// Source of per-chunk embeddings, standing in for a video backbone.
pub trait ChunkFeatureProvider {
    /// Width of every returned vector.
    fn dim(&self) -> usize;

    /// Embedding of frames `frames` (absolute, half-open) of `video_id`
    /// observed with a window of `granularity` frames.
    fn chunk_features(
        &self,
        video_id: &str,
        frames: Range<usize>,
        granularity: usize,
    ) -> std::result::Result<Vec<f64>, String>;

    /// Whether concurrent calls are allowed.
    fn is_concurrent(&self) -> bool {
        true
    }
}

/// Three `segments × D` matrices, one per granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub video_id: String,
    pub dim: usize,
    pub short: Tensor,
    pub medium: Tensor,
    pub long: Tensor,
}

/// Which granularity a single-scale ablation keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Short,
    Medium,
    Long,
}

impl FeatureVolume {
    pub fn new(video_id: impl Into<String>, short: Tensor, medium: Tensor, long: Tensor) -> Result<Self> {
        let (rows, dim) = short.dims2()?;
        for m in [&medium, &long] {
            if m.shape() != short.shape() {
                return Err(Error::Shape {
                    op: "feature_volume",
                    lhs: short.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        if rows == 0 || dim == 0 {
            return Err(Error::contract("feature volume must be non-empty"));
        }
        if !(short.is_finite() && medium.is_finite() && long.is_finite()) {
            return Err(Error::contract("feature volume contains non-finite values"));
        }
        Ok(Self {
            video_id: video_id.into(),
            dim,
            short,
            medium,
            long,
        })
    }

    pub fn segments(&self) -> usize {
        self.short.rows()
    }

    pub fn matrices(&self) -> [&Tensor; 3] {
        [&self.short, &self.medium, &self.long]
    }

    pub fn matrix(&self, scale: Scale) -> &Tensor {
        match scale {
            Scale::Short => &self.short,
            Scale::Medium => &self.medium,
            Scale::Long => &self.long,
        }
    }

    /// Copy whose three slots all carry the chosen granularity, so the full
    /// architecture sees information from one time scale only.
    pub fn single_scale(&self, scale: Scale) -> Self {
        let m = self.matrix(scale).clone();
        Self {
            video_id: self.video_id.clone(),
            dim: self.dim,
            short: m.clone(),
            medium: m.clone(),
            long: m,
        }
    }

    /// Rows reordered as `perm[i]`-th original row at position `i`.
    pub fn permute_segments(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.video_id.clone(),
            self.short.select_rows(perm)?,
            self.medium.select_rows(perm)?,
            self.long.select_rows(perm)?,
        )
    }
}

/// Builds the 32-segment volume for one video.
pub fn build_feature_volume(
    provider: &dyn ChunkFeatureProvider,
    video_id: &str,
    total_frames: usize,
    granularities: [usize; 3],
) -> Result<FeatureVolume> {
    if total_frames < SEGMENTS {
        return Err(Error::contract(format!(
            "video {video_id} has {total_frames} frames, need at least {SEGMENTS}"
        )));
    }
    let dim = provider.dim();
    let mut cache: HashMap<(Range<usize>, usize), Vec<f64>> = HashMap::new();
    let mut mats: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(SEGMENTS * dim)).collect();

    for seg in 0..SEGMENTS {
        let seg_range = segment_range(seg, SEGMENTS, total_frames);
        for (slot, &g) in granularities.iter().enumerate() {
            let plan = plan_chunks(seg_range.len(), g)?;
            let mut chunks = Vec::with_capacity(plan.chunk_ranges.len());
            for r in &plan.chunk_ranges {
                let abs = seg_range.start + r.start..seg_range.start + r.end;
                let key = (abs.clone(), g);
                let f = match cache.get(&key) {
                    Some(f) => f.clone(),
                    None => {
                        let f = provider
                            .chunk_features(video_id, abs, g)
                            .map_err(|message| Error::Provider {
                                segment: seg,
                                granularity: g,
                                message,
                            })?;
                        if f.len() != dim || f.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Provider {
                                segment: seg,
                                granularity: g,
                                message: format!("bad feature vector of width {}", f.len()),
                            });
                        }
                        cache.insert(key, f.clone());
                        f
                    }
                };
                chunks.push(f);
            }
            mats[slot].extend(aggregate_segment(&chunks)?);
        }
    }
    let mut it = mats.into_iter().map(|m| Tensor::matrix(SEGMENTS, dim, m));
    let (s, m, l) = (it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?);
    FeatureVolume::new(video_id, s, m, l)
}
