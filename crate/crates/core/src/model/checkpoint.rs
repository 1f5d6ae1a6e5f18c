//! Checkpoint file:
//!
//! ```text
//! magic "AIMDTCK\0" | u32 version | u32 header length | header (TOML)
//! then every tensor as little-endian f32, in header order
//! ```
//!
//! The header carries the model and training configuration, input
//! normalization and an index of tensors with shapes, offsets and
//! per-tensor checksums.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{tensor_specs, Params};
use super::train::Normalizer;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AIMDTCK\0";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model with everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct DtModel {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub norm: Normalizer,
    pub params: Params,
    /// Hash of the run configuration that produced the model.
    pub config_hash: String,
    /// Hash of the training dataset's manifest.
    pub dataset_hash: String,
    /// Mean batch loss over the final logging interval.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Offset into the tensor blob, in bytes.
    offset: usize,
    /// Length in bytes.
    len: usize,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config_hash: String,
    dataset_hash: String,
    final_loss: f64,
    model: ModelConfig,
    train: TrainConfig,
    norm: Normalizer,
    tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(m: &DtModel) -> Result<Vec<u8>> {
    m.params.check_shapes(&m.model)?;
    let mut blob = Vec::with_capacity(m.params.n_scalars() * 4);
    let mut tensors = Vec::new();
    for ((name, shape), t) in tensor_specs(&m.model).into_iter().zip(&m.params.tensors) {
        let offset = blob.len();
        for &x in t.iter() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let bytes = &blob[offset..];
        tensors.push(TensorEntry { name, shape, offset, len: bytes.len(), sha256: hex(&Sha256::digest(bytes)[..16]) });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: m.config_hash.clone(),
        dataset_hash: m.dataset_hash.clone(),
        final_loss: m.final_loss,
        model: m.model.clone(),
        train: m.train.clone(),
        norm: m.norm.clone(),
        tensors,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + text.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DtModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let text = bytes
        .get(16..16 + hlen)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| Error::Checkpoint("header truncated or not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("header format version {}", header.format_version)));
    }
    header.model.validate().map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    if header.norm.state_dim() != header.model.state_dim || header.norm.state_std.len() != header.model.state_dim {
        return Err(Error::Checkpoint("normalizer width does not match state_dim".into()));
    }
    let blob = &bytes[16 + hlen..];
    let specs = tensor_specs(&header.model);
    if specs.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} tensors, model needs {}",
            header.tensors.len(),
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    let mut expected_offset = 0;
    for ((name, shape), entry) in specs.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {}: found {:?}, model expects {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != expected_offset || entry.len != shape[0] * shape[1] * 4 {
            return Err(Error::Checkpoint(format!("tensor {name}: bad offset or length")));
        }
        let data = blob
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: data truncated")))?;
        if hex(&Sha256::digest(data)[..16]) != entry.sha256 {
            return Err(Error::Checkpoint(format!("tensor {name}: checksum mismatch")));
        }
        let values: Vec<f64> =
            data.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {name}: non-finite value")));
        }
        tensors.push(Array2::from_shape_vec((shape[0], shape[1]), values).expect("length checked"));
        expected_offset += entry.len;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after tensors", blob.len() - expected_offset)));
    }
    Ok(DtModel {
        model: header.model,
        train: header.train,
        norm: header.norm,
        params: Params { tensors },
        config_hash: header.config_hash,
        dataset_hash: header.dataset_hash,
        final_loss: header.final_loss,
    })
}

pub fn save_checkpoint(m: &DtModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(m)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DtModel> {
    decode_checkpoint(&std::fs::read(path)?)
}
