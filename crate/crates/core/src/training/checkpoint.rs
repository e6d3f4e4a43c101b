//! Checkpoint container: a JSON manifest (format version, model config,
//! label names, tensor directory) followed by raw little-endian f32 blobs.
//!
//! Layout: `u64 LE manifest byte length | manifest JSON | blobs`. Offsets in
//! the manifest are relative to the blob section. The f32 round trip is
//! bitwise exact; checkpoints are written by f32 training runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::encoder::{Model, ModelConfig};

use super::TrainingError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    labels: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    /// Element count.
    len: u64,
}

pub fn save_checkpoint(
    model: &Model<f32>,
    labels: &LabelSet,
    path: impl AsRef<Path>,
) -> Result<(), TrainingError> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut blobs: Vec<u8> = Vec::new();
    for param in model.params() {
        tensors.push(TensorEntry {
            name: param.name.clone(),
            shape: param.shape.clone(),
            offset: blobs.len() as u64,
            len: param.data.len() as u64,
        });
        for v in &param.data {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        labels: labels.names().to_vec(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + manifest_json.len() + blobs.len());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blobs);
    fs::write(path, out).map_err(|source| TrainingError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, LabelSet), TrainingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TrainingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(TrainingError::BadCheckpoint("file shorter than header".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let blob_start = 8 + manifest_len;
    if bytes.len() < blob_start {
        return Err(TrainingError::BadCheckpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..blob_start])
        .map_err(|e| TrainingError::BadCheckpoint(format!("bad manifest: {}", e)))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(TrainingError::VersionMismatch {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blobs = &bytes[blob_start..];

    let mut model: Model<f32> = Model::skeleton(&manifest.config)?;
    let params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(TrainingError::BadCheckpoint(format!(
            "manifest lists {} tensors but the config defines {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for (param, entry) in params.into_iter().zip(&manifest.tensors) {
        if param.name != entry.name {
            return Err(TrainingError::TensorMismatch {
                name: entry.name.clone(),
                detail: format!("expected tensor {:?} at this position", param.name),
            });
        }
        if param.shape != entry.shape {
            return Err(TrainingError::TensorMismatch {
                name: entry.name.clone(),
                detail: format!("shape {:?} does not match config {:?}", entry.shape, param.shape),
            });
        }
        let numel: usize = entry.shape.iter().product();
        if numel as u64 != entry.len {
            return Err(TrainingError::TensorMismatch {
                name: entry.name.clone(),
                detail: format!("len {} inconsistent with shape {:?}", entry.len, entry.shape),
            });
        }
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > blobs.len() {
            return Err(TrainingError::TruncatedBlob {
                name: entry.name.clone(),
            });
        }
        for (i, chunk) in blobs[start..end].chunks_exact(4).enumerate() {
            param.data[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((model, LabelSet::new(manifest.labels)))
}
