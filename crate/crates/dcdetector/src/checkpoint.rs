//! Checkpoint serialization: a JSON manifest plus a flat binary blob.
//!
//! The manifest (written at the checkpoint path itself) records the model
//! configuration and, for every tensor, its name, shape, and byte offset
//! into the blob. The blob (a sibling file, manifest path + `.bin`) is the
//! concatenation of all tensors as little-endian 32-bit floats in manifest
//! order. Parameters are kept on the `f32` grid during training, so the
//! narrowing on save loses nothing and round trips are value-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

const FORMAT_TAG: &str = "dual-attention-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
    blob_len: u64,
}

/// A tensor read back from a checkpoint.
#[derive(Debug)]
pub struct LoadedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_owned();
    os.push(".bin");
    PathBuf::from(os)
}

/// Writes `tensors` (in order) plus `config` to `path` and `path.bin`.
pub fn save_named(
    path: &Path,
    config: serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in tensors {
        entries.push(ManifestEntry {
            name: (*name).to_string(),
            shape: tensor.shape.clone(),
            offset: blob.len() as u64,
        });
        for v in &tensor.data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        config,
        tensors: entries,
        blob_len: blob.len() as u64,
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(blob_path(path), blob)?;
    Ok(())
}

/// Reads a checkpoint back, validating the manifest against the blob.
pub fn load_named(path: &Path) -> Result<(serde_json::Value, Vec<LoadedTensor>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Corrupt(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt(format!("manifest {} is not valid: {e}", path.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let bp = blob_path(path);
    let blob = fs::read(&bp)
        .map_err(|e| Error::Corrupt(format!("cannot read blob {}: {e}", bp.display())))?;
    if blob.len() as u64 != manifest.blob_len {
        return Err(Error::Corrupt(format!(
            "blob length {} does not match manifest ({} bytes expected)",
            blob.len(),
            manifest.blob_len
        )));
    }
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Corrupt(format!(
                "tensor {:?} at offset {} but expected {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let count = numel(&entry.shape);
        let bytes = count as u64 * 4;
        let end = entry.offset + bytes;
        if end > blob.len() as u64 {
            return Err(Error::Corrupt(format!(
                "tensor {:?} extends past the end of the blob",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[entry.offset as usize..end as usize].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(Error::Corrupt(format!(
                    "tensor {:?} contains a non-finite value",
                    entry.name
                )));
            }
            data.push(v);
        }
        tensors.push(LoadedTensor { name: entry.name.clone(), shape: entry.shape.clone(), data });
        expected_offset = end;
    }
    if expected_offset != manifest.blob_len {
        return Err(Error::Corrupt(format!(
            "blob has {} trailing bytes not covered by the manifest",
            manifest.blob_len - expected_offset
        )));
    }
    Ok((manifest.config, tensors))
}
