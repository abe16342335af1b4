//! Checkpoint files: the 8-byte magic `GRRCOCA1`, a little-endian `u64`
//! header length, a UTF-8 JSON header, then raw little-endian `f32`
//! payloads in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::coca::CoCaModel;
use super::config::ModelConfig;
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GRRCOCA1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset from the start of the payload section.
    pub byte_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata such as the tokenizer in use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
    pub extra: Option<serde_json::Value>,
}

/// Writes `params` under the names of `model`'s registry. Values are
/// stored as `f32`.
pub fn save_checkpoint(
    path: &Path,
    model: &CoCaModel,
    params: &ParamSet,
    extra: Option<serde_json::Value>,
) -> Result<()> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: offset,
        });
        offset += 4 * p.value.numel() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
        extra,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in params.iter() {
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    // Write to a sibling file first so an interrupted save never clobbers
    // the previous checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic bytes)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(bad(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(bad(format!("tensor {} is truncated", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let t =
            Tensor::new(entry.shape.clone(), data).map_err(|e| bad(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name.clone(), t));
    }
    Ok(Checkpoint {
        config: header.config,
        tensors,
        extra: header.extra,
    })
}

impl Checkpoint {
    /// Matches stored tensors to `model`'s registry by name and shape.
    pub fn params_for(&self, model: &CoCaModel) -> Result<ParamSet> {
        let specs = model.specs();
        if let Some((name, _)) = self
            .tensors
            .iter()
            .find(|(n, _)| !specs.iter().any(|s| &s.name == n))
        {
            return Err(Error::Checkpoint(format!("unknown tensor {name}")));
        }
        let mut values = Vec::with_capacity(specs.len());
        for spec in specs {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            values.push(t.clone());
        }
        ParamSet::from_tensors(specs, values)
    }
}

/// Rebuilds the model from the stored configuration and loads its values.
pub fn load_checkpoint(path: &Path) -> Result<(CoCaModel, ParamSet, Option<serde_json::Value>)> {
    let ckpt = read_checkpoint(path)?;
    let model = CoCaModel::new(&ckpt.config)?;
    let params = ckpt.params_for(&model)?;
    Ok((model, params, ckpt.extra))
}
