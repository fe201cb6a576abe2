//! `TEGW` checkpoint files.
//!
//! ```text
//! "TEGW"            4 bytes
//! version           u32 (= 1)
//! dim, heads        u32, u32
//! hidden1, hidden2  u32, u32
//! dropout_rate      f64
//! use_layer_norm    u8
//! tensor count      u32
//! per tensor:       u32 name length, name bytes (UTF-8), u32 rank,
//!                   rank × u32 dims, row-major f64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::path::Path;

use super::{zero_params, TeGConfig, TeGParams};
use crate::codec::{put_f64, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TEGW";
pub const VERSION: u32 = 1;

pub fn encode(config: &TeGConfig, params: &TeGParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, config.dim as u32);
    put_u32(&mut out, config.heads as u32);
    put_u32(&mut out, config.fcn_hidden.0 as u32);
    put_u32(&mut out, config.fcn_hidden.1 as u32);
    put_f64(&mut out, config.dropout_rate);
    out.push(u8::from(config.use_layer_norm));

    let mut entries = Vec::new();
    params.visit(&mut |name, t| entries.push((name, t)));
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            put_f64(&mut out, v);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(TeGConfig, TeGParams), FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let config = TeGConfig {
        dim: r.u32()? as usize,
        heads: r.u32()? as usize,
        fcn_hidden: (r.u32()? as usize, r.u32()? as usize),
        dropout_rate: r.f64()?,
        use_layer_norm: match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(FormatError::InvalidHeader(format!("layer-norm flag {other}"))),
        },
    };
    let mut params = zero_params(&config).map_err(|e| FormatError::InvalidHeader(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut found: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::InvalidHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data).expect("element count matches shape");
        if found.insert(name.clone(), t).is_some() {
            return Err(FormatError::InvalidHeader(format!("duplicate tensor {name}")));
        }
    }
    if !r.is_empty() {
        return Err(FormatError::InvalidHeader(format!(
            "trailing bytes after offset {}",
            r.offset()
        )));
    }

    let mut problem = None;
    params.visit_mut(&mut |name, slot| match found.remove(&name) {
        Some(t) if t.shape() == slot.shape() => *slot = t,
        Some(t) => {
            problem.get_or_insert(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing tensor {name}"));
        }
    });
    if let Some(p) = problem {
        return Err(FormatError::InvalidHeader(p));
    }
    if let Some(extra) = found.keys().next() {
        return Err(FormatError::InvalidHeader(format!("unexpected tensor {extra}")));
    }
    Ok((config, params))
}

pub fn write_checkpoint(path: &Path, config: &TeGConfig, params: &TeGParams) -> Result<()> {
    std::fs::write(path, encode(config, params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(TeGConfig, TeGParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
