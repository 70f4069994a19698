//! Self-describing checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `CGTCKPT1`                          |
//! | 8      | 4    | format version, u32 (currently 1)         |
//! | 12     | 8    | header length `H` in bytes, u64           |
//! | 20     | H    | UTF-8 JSON header                         |
//! | 20+H   | …    | every tensor's values as f64, in header order |
//!
//! The header is `{"model_config": {...}, "vocab_hash": "<sha256 hex>",
//! "tensors": [{"name": ..., "shape": [...]}, ...]}`. Values are stored with
//! `f64::to_le_bytes`, so a save/load cycle is bit-exact.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CgtModel, ModelConfig};
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CGTCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CgtModel,
    pub vocab_hash: String,
}

pub fn to_bytes(model: &CgtModel, vocab_hash: &str) -> Result<Vec<u8>> {
    let header = Header {
        model_config: model.config().clone(),
        vocab_hash: vocab_hash.to_string(),
        tensors: model
            .params()
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + model.params().numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])?;

    let mut params = ParamSet::new();
    let mut offset = body_start;
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * 8;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated data for {}",
                entry.name
            )));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(entry.name, Tensor::new(entry.shape, data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        model: CgtModel::from_params(header.model_config, params)?,
        vocab_hash: header.vocab_hash,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: &Path, model: &CgtModel, vocab_hash: &str) -> Result<()> {
    let bytes = to_bytes(model, vocab_hash)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
