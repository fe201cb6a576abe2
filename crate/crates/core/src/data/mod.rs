//! Feature files, label manifests, the synthetic dataset generator and the
//! balanced batch sampler.
//!
//! A dataset directory looks like
//!
//! ```text
//! <dir>/features/<video_id>.tegf
//! <dir>/train.jsonl
//! <dir>/test.jsonl
//! ```

pub mod synthetic;
pub mod tegf;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{FeatureVolume, Scale};

pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};
pub use tegf::{read_feature_file, write_feature_file};

/// Videos per class in one training batch.
pub const BATCH_PER_CLASS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Synthetic,
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub volume: FeatureVolume,
    /// Chunk lengths behind the short, medium and long matrices.
    pub granularities: [usize; 3],
    pub source: FeatureSource,
}

impl FeatureRecord {
    pub fn video_id(&self) -> &str {
        &self.volume.video_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoLabel {
    pub video_id: String,
    pub y: u8,
    pub anomaly_class: String,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_truth: Option<Vec<u8>>,
}

impl VideoLabel {
    pub fn validate(&self) -> Result<()> {
        if self.y > 1 {
            return Err(Error::contract(format!("video {}: label {} is not 0/1", self.video_id, self.y)));
        }
        if let Some(t) = &self.frame_truth {
            if t.len() != self.frames {
                return Err(Error::contract(format!(
                    "video {}: frame truth has {} entries for {} frames",
                    self.video_id,
                    t.len(),
                    self.frames
                )));
            }
            if t.iter().any(|&v| v > 1) {
                return Err(Error::contract(format!("video {}: frame truth is not 0/1", self.video_id)));
            }
        }
        Ok(())
    }
}

/// Records and labels, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<FeatureRecord>,
    pub labels: Vec<VideoLabel>,
}

impl Dataset {
    pub fn new(records: Vec<FeatureRecord>, labels: Vec<VideoLabel>) -> Result<Self> {
        if records.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} records but {} labels",
                records.len(),
                labels.len()
            )));
        }
        for (r, l) in records.iter().zip(&labels) {
            if r.video_id() != l.video_id {
                return Err(Error::contract(format!(
                    "record {} paired with label {}",
                    r.video_id(),
                    l.video_id
                )));
            }
            l.validate()?;
        }
        Ok(Self { records, labels })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.volume.dim)
    }

    pub fn indices_with_label(&self, y: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].y == y).collect()
    }

    /// Copy where every record carries only one granularity.
    pub fn single_scale(&self, scale: Scale) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| FeatureRecord {
                volume: r.volume.single_scale(scale),
                ..r.clone()
            })
            .collect();
        Self {
            records,
            labels: self.labels.clone(),
        }
    }

    /// Writes features under `dir/features` and the manifest as `dir/<split>.jsonl`.
    pub fn save(&self, dir: &Path, split: &str) -> Result<()> {
        let features = dir.join("features");
        std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        for r in &self.records {
            write_feature_file(r, &feature_path(dir, r.video_id()))?;
        }
        write_manifest(&manifest_path(dir, split), &self.labels)
    }

    /// Loads the manifest `dir/<split>.jsonl` and the feature file of every entry.
    pub fn load(dir: &Path, split: &str) -> Result<Self> {
        let labels = read_manifest(&manifest_path(dir, split))?;
        let records = labels
            .iter()
            .map(|l| read_feature_file(&feature_path(dir, &l.video_id)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, labels)
    }
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join("features").join(format!("{video_id}.tegf"))
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn write_manifest(path: &Path, labels: &[VideoLabel]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<VideoLabel>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let label: VideoLabel = serde_json::from_str(&line)?;
        label.validate()?;
        labels.push(label);
    }
    Ok(labels)
}

/// Dataset indices of one training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

/// Draws 64 normal and 64 abnormal videos uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Result<Batch> {
    sample_batch_sized(dataset, BATCH_PER_CLASS, rng)
}

pub fn sample_batch_sized<R: Rng + ?Sized>(dataset: &Dataset, per_class: usize, rng: &mut R) -> Result<Batch> {
    let normal = dataset.indices_with_label(0);
    let abnormal = dataset.indices_with_label(1);
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::contract(format!(
            "batch needs both classes, dataset has {} normal and {} abnormal videos",
            normal.len(),
            abnormal.len()
        )));
    }
    let mut draw = |pool: &[usize]| -> Vec<usize> {
        (0..per_class).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let normal = draw(&normal);
    let abnormal = draw(&abnormal);
    Ok(Batch { normal, abnormal })
}
