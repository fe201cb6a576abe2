//! `TEGF` per-video feature files.
//!
//! ```text
//! "TEGF"              4 bytes
//! version             u32 (= 1)
//! D                   u32
//! segments            u32 (= 32)
//! granularity count   u8  (= 3)
//! per granularity:    u32 G, segments × D row-major f32
//! ```
//!
//! Little-endian throughout. Values are widened to f64 on read, so a record
//! round-trips bit-exactly as long as its entries are f32-representable.

use std::path::Path;

use super::{FeatureRecord, FeatureSource};
use crate::codec::{put_f32, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::granularity::{FeatureVolume, SEGMENTS};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TEGF";
pub const VERSION: u32 = 1;
const GRANULARITY_COUNT: u8 = 3;

pub fn encode(record: &FeatureRecord) -> Result<Vec<u8>> {
    let v = &record.volume;
    if v.segments() != SEGMENTS {
        return Err(Error::contract(format!(
            "feature files hold {SEGMENTS} segments, record {} has {}",
            v.video_id,
            v.segments()
        )));
    }
    let mut out = Vec::with_capacity(17 + 3 * (4 + 4 * SEGMENTS * v.dim));
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, v.dim as u32);
    put_u32(&mut out, SEGMENTS as u32);
    out.push(GRANULARITY_COUNT);
    for (g, m) in record.granularities.iter().zip(v.matrices()) {
        put_u32(&mut out, *g as u32);
        for &x in m.data() {
            put_f32(&mut out, x as f32);
        }
    }
    Ok(out)
}

/// Parses a feature file. The video id is not stored and must be supplied.
pub fn decode(video_id: &str, bytes: &[u8]) -> Result<FeatureRecord, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let dim = r.u32()? as usize;
    let segments = r.u32()? as usize;
    let count = r.u8()?;
    if dim == 0 {
        return Err(FormatError::InvalidHeader("feature width is zero".into()));
    }
    if segments != SEGMENTS {
        return Err(FormatError::InvalidHeader(format!("{segments} segments, expected {SEGMENTS}")));
    }
    if count != GRANULARITY_COUNT {
        return Err(FormatError::InvalidHeader(format!("{count} granularities, expected 3")));
    }
    let mut granularities = [0usize; 3];
    let mut mats = Vec::with_capacity(3);
    for g in &mut granularities {
        *g = r.u32()? as usize;
        let mut data = Vec::with_capacity(segments * dim);
        for _ in 0..segments * dim {
            data.push(f64::from(r.f32()?));
        }
        mats.push(Tensor::matrix(segments, dim, data).expect("sized above"));
    }
    if !r.is_empty() {
        return Err(FormatError::InvalidHeader(format!(
            "trailing bytes after offset {}",
            r.offset()
        )));
    }
    let long = mats.pop().unwrap();
    let medium = mats.pop().unwrap();
    let short = mats.pop().unwrap();
    let volume = FeatureVolume::new(video_id, short, medium, long)
        .map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
    Ok(FeatureRecord {
        volume,
        granularities,
        source: FeatureSource::Imported,
    })
}

pub fn write_feature_file(record: &FeatureRecord, path: &Path) -> Result<()> {
    let bytes = encode(record)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature file; the video id is taken from the file stem.
pub fn read_feature_file(path: &Path) -> Result<FeatureRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    decode(&id, &bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
