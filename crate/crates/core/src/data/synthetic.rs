//! Deterministic synthetic surveillance features.
//!
//! Every chunk embedding is Gaussian noise plus, for abnormal videos, a
//! shift along a class direction. The shift is weighted by how much of the
//! chunk the anomaly covers and by how well the chunk length matches the
//! anomaly's time scale, so brief incidents stand out at short granularity
//! and prolonged ones at long granularity. Noise per chunk shrinks with the
//! chunk length so that segment averages carry equal noise at every scale.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureRecord, FeatureSource, VideoLabel};
use crate::error::{Error, Result};
use crate::granularity::{build_feature_volume, ChunkFeatureProvider, DEFAULT_GRANULARITIES, SEGMENTS};

/// Chunk length at which noise has unit variance per dimension.
pub const NOISE_REFERENCE_GRANULARITY: usize = 8;
const CLASS_SPECIFIC_WEIGHT: f64 = 0.5;

pub const SEEN_CLASSES: [&str; 3] = ["littering", "fighting", "dangerous_throwing"];
pub const UNSEEN_CLASSES: [&str; 3] = ["improper_zone", "unlawful_stop", "improper_turn"];
pub const NORMAL_CLASS: &str = "normal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationProfile {
    Short,
    Medium,
    Long,
    Mixed,
}

impl DurationProfile {
    /// Inclusive frame-count range of planted anomalies.
    pub fn frame_range(self) -> (usize, usize) {
        match self {
            Self::Short => (8, 24),
            Self::Medium => (48, 160),
            Self::Long => (384, 1024),
            Self::Mixed => (8, 1024),
        }
    }

    /// Chunk length the anomaly is most visible at.
    pub fn characteristic_granularity(self) -> usize {
        match self {
            Self::Short => 8,
            Self::Medium => 32,
            Self::Long | Self::Mixed => 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassPool {
    Seen,
    Unseen,
    All,
}

impl ClassPool {
    pub fn classes(self) -> Vec<&'static str> {
        match self {
            Self::Seen => SEEN_CLASSES.to_vec(),
            Self::Unseen => UNSEEN_CLASSES.to_vec(),
            Self::All => SEEN_CLASSES.iter().chain(&UNSEEN_CLASSES).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub normal_videos: usize,
    pub abnormal_videos: usize,
    pub dim: usize,
    pub frames: usize,
    pub profile: DurationProfile,
    pub signal_scale: f64,
    pub noise_std: f64,
    pub classes: ClassPool,
    pub granularities: [usize; 3],
    /// Seeds the class directions and, together with `id_prefix`, every
    /// per-video draw. Splits sharing a seed share class directions.
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::desk_train()
    }
}

impl SyntheticConfig {
    pub fn desk_train() -> Self {
        Self {
            normal_videos: 100,
            abnormal_videos: 100,
            dim: 16,
            frames: 2048,
            profile: DurationProfile::Mixed,
            signal_scale: 6.0,
            noise_std: 1.0,
            classes: ClassPool::Seen,
            granularities: DEFAULT_GRANULARITIES,
            seed: 2024,
            id_prefix: "train_".into(),
        }
    }

    pub fn desk_test() -> Self {
        Self {
            normal_videos: 25,
            abnormal_videos: 25,
            classes: ClassPool::All,
            id_prefix: "test_".into(),
            ..Self::desk_train()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal_videos == 0 || self.abnormal_videos == 0 {
            return Err(Error::config("synthetic dataset needs at least one video per class"));
        }
        if self.dim == 0 {
            return Err(Error::config("feature width must be positive"));
        }
        if self.frames < SEGMENTS {
            return Err(Error::config(format!("need at least {SEGMENTS} frames per video")));
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return Err(Error::config(format!("signal scale must be positive, got {}", self.signal_scale)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("noise std must be non-negative, got {}", self.noise_std)));
        }
        if self.granularities.contains(&0) {
            return Err(Error::config("granularities must be positive"));
        }
        Ok(())
    }
}

/// Planted content of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoPlan {
    pub video_id: String,
    pub frames: usize,
    pub anomaly: Option<PlantedAnomaly>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedAnomaly {
    pub class: String,
    pub profile: DurationProfile,
    pub interval: Range<usize>,
}

impl VideoPlan {
    pub fn label(&self) -> VideoLabel {
        let mut truth = vec![0u8; self.frames];
        if let Some(a) = &self.anomaly {
            truth[a.interval.clone()].fill(1);
        }
        VideoLabel {
            video_id: self.video_id.clone(),
            y: u8::from(self.anomaly.is_some()),
            anomaly_class: self
                .anomaly
                .as_ref()
                .map_or_else(|| NORMAL_CLASS.to_string(), |a| a.class.clone()),
            frames: self.frames,
            frame_truth: Some(truth),
        }
    }
}

fn mix(h: u64, v: u64) -> u64 {
    let mut z = (h ^ v).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_str(h: u64, s: &str) -> u64 {
    let mut f: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        f = (f ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    mix(h, f)
}

/// Normal videos first, then abnormal ones.
pub fn plan_videos(cfg: &SyntheticConfig) -> Result<Vec<VideoPlan>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hash_str(mix(cfg.seed, 1), &cfg.id_prefix));
    let mut plans = Vec::with_capacity(cfg.normal_videos + cfg.abnormal_videos);
    for i in 0..cfg.normal_videos {
        plans.push(VideoPlan {
            video_id: format!("{}n{i:04}", cfg.id_prefix),
            frames: cfg.frames,
            anomaly: None,
        });
    }
    let classes = cfg.classes.classes();
    for i in 0..cfg.abnormal_videos {
        let class = classes[rng.random_range(0..classes.len())].to_string();
        let profile = match cfg.profile {
            DurationProfile::Mixed => {
                [DurationProfile::Short, DurationProfile::Medium, DurationProfile::Long][rng.random_range(0..3)]
            }
            p => p,
        };
        let (lo, hi) = profile.frame_range();
        let hi = hi.min(cfg.frames);
        let lo = lo.min(hi);
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=cfg.frames - len);
        plans.push(VideoPlan {
            video_id: format!("{}a{i:04}", cfg.id_prefix),
            frames: cfg.frames,
            anomaly: Some(PlantedAnomaly {
                class,
                profile,
                interval: start..start + len,
            }),
        });
    }
    Ok(plans)
}

/// Unit direction of each class: a shared anomaly component plus a
/// class-specific one.
pub fn class_directions(seed: u64, dim: usize) -> HashMap<String, Vec<f64>> {
    let gaussian = |tag: &str| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_str(mix(seed, 2), tag));
        (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let unit = |v: Vec<f64>| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let common = unit(gaussian("common"));
    ClassPool::All
        .classes()
        .into_iter()
        .map(|c| {
            let specific = unit(gaussian(c));
            let d = common
                .iter()
                .zip(&specific)
                .map(|(a, b)| a + CLASS_SPECIFIC_WEIGHT * b)
                .collect();
            (c.to_string(), unit(d))
        })
        .collect()
}

/// Width, in octaves, of the chunk-length tuning curve.
pub const SCALE_TUNING_OCTAVES: f64 = 0.5;

/// Visibility of an anomaly with time scale `tau` through chunks of `g` frames.
pub fn scale_match(g: usize, tau: usize) -> f64 {
    let r = (g as f64 / tau as f64).log2() / SCALE_TUNING_OCTAVES;
    (-0.5 * r * r).exp()
}

pub struct SyntheticProvider {
    dim: usize,
    seed: u64,
    signal_scale: f64,
    noise_std: f64,
    directions: HashMap<String, Vec<f64>>,
    anomalies: HashMap<String, PlantedAnomaly>,
}

impl SyntheticProvider {
    pub fn new(cfg: &SyntheticConfig, plans: &[VideoPlan]) -> Self {
        Self {
            dim: cfg.dim,
            seed: cfg.seed,
            signal_scale: cfg.signal_scale,
            noise_std: cfg.noise_std,
            directions: class_directions(cfg.seed, cfg.dim),
            anomalies: plans
                .iter()
                .filter_map(|p| p.anomaly.clone().map(|a| (p.video_id.clone(), a)))
                .collect(),
        }
    }

    /// Noise-free part of a chunk embedding.
    pub fn signal(&self, video_id: &str, frames: &Range<usize>, granularity: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let Some(a) = self.anomalies.get(video_id) else {
            return out;
        };
        let overlap = frames.end.min(a.interval.end).saturating_sub(frames.start.max(a.interval.start));
        if overlap == 0 || frames.is_empty() {
            return out;
        }
        let weight = self.signal_scale
            * (overlap as f64 / frames.len() as f64)
            * scale_match(granularity, a.profile.characteristic_granularity());
        for (o, d) in out.iter_mut().zip(&self.directions[&a.class]) {
            *o = weight * d;
        }
        out
    }
}

impl ChunkFeatureProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn chunk_features(
        &self,
        video_id: &str,
        frames: Range<usize>,
        granularity: usize,
    ) -> std::result::Result<Vec<f64>, String> {
        let mut out = self.signal(video_id, &frames, granularity);
        if self.noise_std > 0.0 {
            let key = [frames.start as u64, frames.end as u64, granularity as u64]
                .into_iter()
                .fold(hash_str(mix(self.seed, 3), video_id), mix);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let std = self.noise_std * (NOISE_REFERENCE_GRANULARITY as f64 / granularity as f64).sqrt();
            for o in &mut out {
                *o += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(out)
    }
}

/// Builds records and labels; features are rounded to f32 precision so the
/// records survive a feature-file round trip unchanged.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<(Vec<FeatureRecord>, Vec<VideoLabel>)> {
    let plans = plan_videos(cfg)?;
    let provider = SyntheticProvider::new(cfg, &plans);
    let mut records = Vec::with_capacity(plans.len());
    for p in &plans {
        let mut volume = build_feature_volume(&provider, &p.video_id, p.frames, cfg.granularities)?;
        for m in [&mut volume.short, &mut volume.medium, &mut volume.long] {
            for v in m.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        records.push(FeatureRecord {
            volume,
            granularities: cfg.granularities,
            source: FeatureSource::Synthetic,
        });
    }
    Ok((records, plans.iter().map(VideoPlan::label).collect()))
}

pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    let (records, labels) = generate_synthetic_dataset(cfg)?;
    Dataset::new(records, labels)
}
