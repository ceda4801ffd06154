//! Binary checkpoints: an 8-byte magic, a little-endian u32 format version, a
//! little-endian u64 manifest length, the JSON manifest, then every tensor as
//! raw little-endian f32 values in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{AdamWState, Tensor};

pub const MAGIC: &[u8; 8] = b"TDUCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const M_PREFIX: &str = "optimizer.m/";
const V_PREFIX: &str = "optimizer.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
    /// Optimizer step counter; absent when no optimizer state is stored.
    pub optimizer_t: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamWState<f32>>,
    pub step: u64,
}

pub fn to_bytes(params: &ModelParams<f32>, optimizer: Option<&AdamWState<f32>>, step: u64) -> Result<Vec<u8>> {
    let store = &params.store;
    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut tensors: Vec<&Tensor<f32>> = Vec::new();
    for (name, t) in store.names().iter().zip(store.tensors()) {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec() });
        tensors.push(t);
    }
    if let Some(opt) = optimizer {
        if opt.m.len() != store.len() || opt.v.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match the parameter list"));
        }
        for (prefix, moments) in [(M_PREFIX, &opt.m), (V_PREFIX, &opt.v)] {
            for (name, t) in store.names().iter().zip(moments) {
                entries.push(TensorEntry { name: format!("{prefix}{name}"), shape: t.shape().to_vec() });
                tensors.push(t);
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        step,
        optimizer_t: optimizer.map(|o| o.t),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|source| Error::Json {
        context: "checkpoint manifest".into(),
        source,
    })?;
    let floats: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CheckpointTruncated { expected: HEADER_LEN, found: bytes.len() });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::CheckpointFormat("manifest length overflows".into()))?;
    if bytes.len() < end {
        return Err(Error::CheckpointTruncated { expected: end, found: bytes.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|source| Error::Json {
        context: "checkpoint manifest".into(),
        source,
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    Ok((manifest, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, mut offset) = read_manifest(bytes)?;
    let mut params: ModelParams<f32> = ModelParams::new(manifest.config.clone(), 0)?;
    let n = params.store.len();
    let groups = if manifest.optimizer_t.is_some() { 3 } else { 1 };
    if manifest.tensors.len() != groups * n {
        return Err(Error::CheckpointFormat(format!(
            "manifest lists {} tensors, model layout needs {}",
            manifest.tensors.len(),
            groups * n
        )));
    }
    let floats: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let expected = offset + 4 * floats;
    if bytes.len() < expected {
        return Err(Error::CheckpointTruncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut loaded = Vec::with_capacity(manifest.tensors.len());
    for (i, entry) in manifest.tensors.iter().enumerate() {
        let base = &params.store.names()[i % n];
        let want = match i / n {
            0 => base.to_string(),
            1 => format!("{M_PREFIX}{base}"),
            _ => format!("{V_PREFIX}{base}"),
        };
        if entry.name != want {
            return Err(Error::CheckpointFormat(format!("tensor {i} is {}, expected {want}", entry.name)));
        }
        let model_shape = params.store.tensors()[i % n].shape();
        if entry.shape != model_shape {
            return Err(Error::CheckpointShape {
                name: entry.name.clone(),
                manifest: entry.shape.clone(),
                model: model_shape.to_vec(),
            });
        }
        let count: usize = entry.shape.iter().product();
        let data = bytes[offset..offset + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * count;
        loaded.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let mut rest = loaded.split_off(n);
    params.store.replace_tensors(loaded)?;
    let optimizer = manifest.optimizer_t.map(|t| {
        let v = rest.split_off(n);
        AdamWState { m: rest, v, t }
    });
    Ok(Checkpoint { params, optimizer, step: manifest.step })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    optimizer: Option<&AdamWState<f32>>,
    step: u64,
) -> Result<()> {
    let bytes = to_bytes(params, optimizer, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
