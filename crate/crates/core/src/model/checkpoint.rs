//! `.rmfckpt` files: a magic tag and JSON header followed by the parameters
//! as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetShape, Parameterization};
use crate::error::{Error, Result};
use crate::geometry::Manifold;

const MAGIC: &[u8; 8] = b"RMFCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub manifold: Manifold,
    pub shape: NetShape,
    pub parameterization: Parameterization,
    pub seed: u64,
    /// Free-form provenance, e.g. `"params"` or `"ema"`.
    pub kind: String,
    /// Caller-defined payload such as the config hash.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    if params.len() != header.shape.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match shape ({})",
            params.len(),
            header.shape.param_count()
        )));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(24 + json.len() + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not an rmflow checkpoint"));
    }
    let read_u64 = |at: usize| -> Option<u64> {
        bytes.get(at..at + 8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    };
    let hlen = read_u64(8).ok_or_else(|| bad("truncated header length"))? as usize;
    let hend = 16usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
    let header: CheckpointHeader = serde_json::from_slice(bytes.get(16..hend).ok_or_else(|| bad("truncated header"))?)
        .map_err(|e| bad(&format!("header: {e}")))?;
    let n = read_u64(hend).ok_or_else(|| bad("truncated parameter count"))? as usize;
    let start = hend + 8;
    let body = bytes
        .get(start..start + 8 * n)
        .ok_or_else(|| bad("truncated parameters"))?;
    if start + 8 * n != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    if n != header.shape.param_count() {
        return Err(bad("parameter count does not match the stored shape"));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, params))
}
