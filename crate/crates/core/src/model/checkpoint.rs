//! Binary checkpoint format.
//!
//! ```text
//! "CPPAP1\0"            7 magic bytes
//! u64 little-endian     length of the JSON header in bytes
//! JSON header           {config, metadata, tensors: [{name, kind, shape, offset, len}]}
//! f64 little-endian     tensor blobs, in header order; offsets are relative
//!                       to the first byte after the header
//! ```
//!
//! Batch-norm running statistics are stored alongside the parameters so a
//! reloaded model reproduces eval-mode outputs bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::preprocessing::GainStats;

pub const MAGIC: &[u8; 7] = b"CPPAP1\0";

/// Training provenance carried with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    /// Manifest the model was trained from.
    pub manifest: Option<String>,
    /// Training-set mean of each participant dimension.
    pub participant_means: Option<Vec<f64>>,
    pub gain_stats: Option<GainStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    metadata: CheckpointMetadata,
    tensors: Vec<TensorEntry>,
}

fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: &str, kind: TensorKind, shape: Vec<usize>, data: &[f64]| {
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape,
            offset: blob.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.params().iter() {
        push(&p.name, TensorKind::Param, p.value.shape().to_vec(), p.value.data());
    }
    for b in model.buffers() {
        push(&b.name, TensorKind::RunningMean, vec![b.mean.len()], &b.mean);
        push(&b.name, TensorKind::RunningVar, vec![b.var.len()], &b.var);
    }
    let header = Header {
        config: model.config().clone(),
        metadata: model.metadata.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Model> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt("missing CPPAP1 magic header"));
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap();
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let start = MAGIC.len() + 8;
    let header_end = start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[start..header_end])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    let blob = &bytes[header_end..];

    let mut model = Model::new(header.config.clone(), 0)
        .map_err(|e| Error::Format(format!("header config is invalid: {e}")))?;
    model.metadata = header.metadata;

    let expected_params = model.params().len();
    let expected_buffers = model.buffers().len();
    let mut seen_params = 0;
    let mut seen_buffers = 0;
    let mut blob_end = 0u64;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if n as u64 != e.len {
            return Err(fmt(&format!("{}: shape {:?} disagrees with length {}", e.name, e.shape, e.len)));
        }
        let byte_len = e.len.checked_mul(8).ok_or_else(|| fmt("tensor too large"))?;
        let end = e.offset.checked_add(byte_len).ok_or_else(|| fmt("tensor too large"))?;
        if end > blob.len() as u64 {
            return Err(fmt(&format!("{}: data truncated", e.name)));
        }
        blob_end = blob_end.max(end);
        let data: Vec<f64> = blob[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        match e.kind {
            TensorKind::Param => {
                let t = Tensor::new(e.shape.clone(), data)
                    .map_err(|err| Error::Format(format!("{}: {err}", e.name)))?;
                model
                    .set_param(&e.name, t)
                    .map_err(|err| Error::Format(format!("{}: {err}", e.name)))?;
                seen_params += 1;
            }
            TensorKind::RunningMean | TensorKind::RunningVar => {
                let buf = model
                    .buffers_mut()
                    .iter_mut()
                    .find(|b| b.name == e.name)
                    .ok_or_else(|| fmt(&format!("unknown buffer {}", e.name)))?;
                let slot = if e.kind == TensorKind::RunningMean { &mut buf.mean } else { &mut buf.var };
                if slot.len() != data.len() || !data.iter().all(|v| v.is_finite()) {
                    return Err(fmt(&format!("{}: bad running statistics", e.name)));
                }
                *slot = data;
                seen_buffers += 1;
            }
        }
    }
    if seen_params != expected_params || seen_buffers != 2 * expected_buffers {
        return Err(fmt(&format!(
            "expected {expected_params} parameters and {} buffers, found {seen_params} and {seen_buffers}",
            2 * expected_buffers
        )));
    }
    if blob_end != blob.len() as u64 {
        return Err(fmt("trailing bytes after tensor data"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and requires its stored configuration to equal
/// `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        let got = model.config().variant();
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {got} ({}), expected {} ({})",
            model.config().fusion,
            expected.variant(),
            expected.fusion
        )));
    }
    Ok(model)
}

#[cfg(test)]
pub(crate) fn encode_for_test(model: &Model) -> Vec<u8> {
    encode(model).unwrap()
}

#[cfg(test)]
pub(crate) fn decode_for_test(bytes: &[u8]) -> Result<Model> {
    decode(bytes)
}
