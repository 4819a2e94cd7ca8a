//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `SPDLCKPT`, a little-endian `u32` format
//! version, a `u32` header length, the JSON header, then every parameter
//! tensor as little-endian `f32` values in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autograd::Tensor;
use super::model::{ModelParams, Variant};
use crate::arch::TransformerSpec;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPDLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub spec: TransformerSpec,
    pub variant: Variant,
    pub max_len: usize,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(params: &ModelParams<f32>, seed: u64, step: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        spec: params.spec,
        variant: params.variant,
        max_len: params.max_len,
        seed,
        step,
        tensors: params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry { name, shape: t.shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.n_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointHeader)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let layout = ModelParams::<f32>::layout(&header.spec, header.variant);
    let expected: Vec<TensorEntry> = layout
        .into_iter()
        .map(|(name, shape)| TensorEntry { name, shape })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor table does not match the declared architecture"));
    }
    let mut data = &bytes[16 + header_len..];
    let mut tensors = Vec::with_capacity(expected.len());
    for entry in &expected {
        let n = entry.shape[0] * entry.shape[1];
        if data.len() < 4 * n {
            return Err(bad(format!("truncated data for {}", entry.name)));
        }
        let values = data[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(entry.shape[0], entry.shape[1], values));
        data = &data[4 * n..];
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    let params = ModelParams::from_tensors(header.spec, header.variant, header.max_len, tensors)
        .map_err(|e| bad(e.to_string()))?;
    Ok((params, header))
}

pub fn save(path: &Path, params: &ModelParams<f32>, seed: u64, step: u64) -> Result<()> {
    std::fs::write(path, encode(params, seed, step)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams<f32>, CheckpointHeader)> {
    decode(&std::fs::read(path)?)
}
