//! Weight checkpoints: a JSON manifest describing each tensor's name, shape
//! and byte offset, next to a flat little-endian f64 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    pub blob: String,
    pub entries: Vec<CheckpointEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

const FORMAT: &str = "f64-le-v1";

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.join(blob))
        .unwrap_or_else(|| PathBuf::from(blob))
}

/// Writes `<manifest_path>` and a sibling `.bin` blob.
pub fn save_checkpoint(
    manifest_path: &Path,
    config_hash: &str,
    tensors: &[(&str, &Tensor)],
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let blob = manifest_path
        .with_extension("bin")
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", manifest_path.display())))?
        .to_string();
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        config_hash: config_hash.into(),
        blob: blob.clone(),
        entries,
        metadata,
    };
    let bin = blob_path(manifest_path, &blob);
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
}

/// Reads a checkpoint, refusing it when its config hash differs from `expected_hash`.
pub fn load_checkpoint(
    manifest_path: &Path,
    expected_hash: Option<&str>,
) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let raw = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::json(manifest_path, e))?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format {}", manifest.format)));
    }
    if let Some(expected) = expected_hash {
        if manifest.config_hash != expected {
            return Err(Error::Data(format!(
                "checkpoint was written for config {} but the model config hashes to {expected}",
                manifest.config_hash
            )));
        }
    }
    let bin = blob_path(manifest_path, &manifest.blob);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        let chunk = bytes
            .get(start..end)
            .ok_or_else(|| Error::Data(format!("tensor {} runs past the end of {}", e.name, bin.display())))?;
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}
