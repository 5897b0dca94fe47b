//! Weight persistence: a JSON manifest plus one little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EngineError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const WEIGHTS_FORMAT: &str = "angiophase-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

/// SHA-256 of the compact JSON rendering of an architecture description.
pub fn arch_hash(arch: &serde_json::Value) -> String {
    let text = serde_json::to_string(arch).expect("json value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest
        .parent()
        .map(|d| d.join(blob))
        .unwrap_or_else(|| PathBuf::from(blob))
}

pub fn save_weights(
    params: &ParamStore,
    manifest_path: &Path,
    arch: Option<&serde_json::Value>,
) -> Result<WeightManifest> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("weights");
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let offset = blob.len() as u64;
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = WeightManifest {
        format: WEIGHTS_FORMAT.to_string(),
        version: WEIGHTS_VERSION,
        dtype: "f64".to_string(),
        blob: blob_name.clone(),
        arch: arch.cloned(),
        arch_hash: arch.map(arch_hash),
        tensors,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(blob_path(manifest_path, &blob_name), &blob)?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EngineError::Format(e.to_string()))?;
    fs::write(manifest_path, text + "\n")?;
    Ok(manifest)
}

pub fn load_weights(manifest_path: &Path) -> Result<(ParamStore, WeightManifest)> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: WeightManifest =
        serde_json::from_str(&text).map_err(|e| EngineError::Format(e.to_string()))?;
    if manifest.format != WEIGHTS_FORMAT {
        return Err(EngineError::Format(format!(
            "unexpected format tag `{}`",
            manifest.format
        )));
    }
    if manifest.version != WEIGHTS_VERSION {
        return Err(EngineError::Format(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    if manifest.dtype != "f64" {
        return Err(EngineError::Format(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }
    if let (Some(arch), Some(hash)) = (&manifest.arch, &manifest.arch_hash) {
        if &arch_hash(arch) != hash {
            return Err(EngineError::Format("architecture hash mismatch".into()));
        }
    }
    let blob = fs::read(blob_path(manifest_path, &manifest.blob))?;
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.nbytes != count as u64 * 8 {
            return Err(EngineError::Format(format!(
                "`{}`: {} bytes declared for {count} values",
                e.name, e.nbytes
            )));
        }
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        let bytes = blob.get(start..end).ok_or_else(|| {
            EngineError::Format(format!(
                "`{}`: bytes {start}..{end} beyond blob of {}",
                e.name,
                blob.len()
            ))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((params, manifest))
}
