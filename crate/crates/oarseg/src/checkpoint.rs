//! Model checkpoints.
//!
//! Layout: the 8-byte magic `OARSEGCK`, the format version as a
//! little-endian `u32`, the manifest length as a little-endian `u64`, the
//! JSON manifest, then every parameter tensor as little-endian `f64` values
//! in manifest order.

use std::path::Path;

use oarseg_core::network::{ModelParams, NamedParam, NetworkConfig};
use oarseg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::files::{read_bytes, write_atomic};

pub const MAGIC: &[u8; 8] = b"OARSEGCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Position of the first value, counted in `f64` elements from the
    /// start of the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    /// Total payload length in `f64` elements.
    pub payload_len: usize,
}

pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let e = ParamEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), offset, len: p.tensor.len() };
            offset += p.tensor.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config().clone(),
        seed: model.seed(),
        params,
        payload_len: offset,
    };
    let json = serde_json::to_vec(&manifest).expect("in-memory JSON serialization");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < PREAMBLE {
        return Err(AppError::Truncated { path: path.into(), bytes: bytes.len() as u64, elem: PREAMBLE });
    }
    if &bytes[..8] != MAGIC {
        return Err(AppError::malformed(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(AppError::Version { path: path.into(), found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREAMBLE..];
    if body.len() < mlen {
        return Err(AppError::malformed(path, format!("manifest length {mlen} exceeds the file")));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|source| AppError::Json { path: path.into(), source })?;
    if manifest.format_version != version {
        return Err(AppError::malformed(path, "manifest and preamble disagree on the format version"));
    }
    let payload = &body[mlen..];
    if !payload.len().is_multiple_of(8) {
        return Err(AppError::Truncated { path: path.into(), bytes: payload.len() as u64, elem: 8 });
    }
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    if values.len() != manifest.payload_len {
        return Err(AppError::SizeMismatch { path: path.into(), expected: manifest.payload_len, found: values.len() });
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len());
        let Some(end) = end else {
            return Err(AppError::malformed(path, format!("parameter {} lies outside the payload", e.name)));
        };
        if e.shape.iter().product::<usize>() != e.len {
            return Err(AppError::malformed(path, format!("parameter {} shape {:?} has {} values", e.name, e.shape, e.len)));
        }
        let tensor = Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())?;
        params.push(NamedParam { name: e.name.clone(), tensor });
    }
    ModelParams::from_parts(manifest.config, manifest.seed, params).map_err(|e| AppError::malformed(path, e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &ModelParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(path, &read_bytes(path)?)
}
