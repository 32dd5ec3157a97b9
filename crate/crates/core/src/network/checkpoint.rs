//! Parameter serialization: a JSON manifest naming each tensor with its shape
//! and byte offset, next to a flat little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "cidc-params";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub params: Vec<ManifestEntry>,
}

/// Pack named tensors into manifest entries and a blob.
pub fn encode(named: &[(&str, &Tensor)]) -> (Vec<ManifestEntry>, Vec<u8>) {
    let mut blob = Vec::with_capacity(named.iter().map(|(_, t)| t.len() * 8).sum());
    let entries = named
        .iter()
        .map(|(name, t)| {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            }
        })
        .collect();
    (entries, blob)
}

/// Inverse of [`encode`].
pub fn decode(entries: &[ManifestEntry], blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let bytes = blob
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| Error::Format(format!("blob too short for parameter {}", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok((e.name.clone(), Tensor::from_vec(&e.shape, data)?))
        })
        .collect()
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write named tensors (and optionally a model config) to `manifest` and its
/// sibling `.bin` blob.
pub fn save_params(
    manifest: &Path,
    named: &[(&str, &Tensor)],
    config: Option<&ModelConfig>,
) -> Result<()> {
    let (params, blob) = encode(named);
    let blob_file = blob_path(manifest);
    let m = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: DTYPE.into(),
        blob: blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("params.bin")
            .into(),
        config: config.cloned(),
        params,
    };
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&blob_file, blob)?;
    fs::write(manifest, json)?;
    Ok(())
}

pub fn load_params(manifest: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let text = fs::read_to_string(manifest)?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION || m.dtype != DTYPE {
        return Err(Error::Format(format!(
            "unsupported manifest {} v{} ({})",
            m.format, m.version, m.dtype
        )));
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let blob = fs::read(dir.join(&m.blob))?;
    let expected: usize = m
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "blob has {} bytes, manifest describes {expected}",
            blob.len()
        )));
    }
    let named = decode(&m.params, &blob)?;
    Ok((m, named))
}

pub fn save_checkpoint(model: &Model, manifest: &Path) -> Result<()> {
    let named: Vec<(&str, &Tensor)> = model
        .names()
        .iter()
        .map(String::as_str)
        .zip(model.params())
        .collect();
    save_params(manifest, &named, Some(&model.config))
}

pub fn load_checkpoint(manifest: &Path) -> Result<Model> {
    let (m, named) = load_params(manifest)?;
    let config = m
        .config
        .ok_or_else(|| Error::Format("checkpoint manifest has no model config".into()))?;
    Model::from_parts(config, named)
}
