//! Checkpoint directory: `manifest.json` plus `params.bin` (little-endian f64,
//! entries concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) into `params.bin`.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub seed: u64,
    pub step: u64,
    pub entries: Vec<CheckpointEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

const FORMAT: u32 = 1;

fn io(path: &Path, source: std::io::Error) -> TensorError {
    TensorError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, seed: u64, step: u64, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for id in store.ids() {
        let t = store.get(id);
        entries.push(CheckpointEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            trainable: store.is_trainable(id),
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { format: FORMAT, seed, step, entries, extra };
    let bin = dir.join("params.bin");
    fs::write(&bin, bytes).map_err(|e| io(&bin, e))?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let mp = dir.join("manifest.json");
    fs::write(&mp, json).map_err(|e| io(&mp, e))
}

/// Restore values into `store` by name. Every store entry must be present
/// with the same shape; extra checkpoint entries are an error too.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let mp = dir.join("manifest.json");
    let raw = fs::read(&mp).map_err(|e| io(&mp, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&raw).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", mp.display())))?;
    if manifest.format != FORMAT {
        return Err(TensorError::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(|e| io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(TensorError::Checkpoint(format!("params.bin length {} is not a multiple of 8", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if manifest.entries.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint has {} entries, model has {}",
            manifest.entries.len(),
            store.len()
        )));
    }
    for e in &manifest.entries {
        let id = store.find(&e.name).ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| TensorError::Checkpoint(format!("{} runs past the end of params.bin", e.name)))?;
        let t = Tensor::new(e.shape.clone(), slice.to_vec())?;
        store.set(id, t).map_err(|err| TensorError::Checkpoint(err.to_string()))?;
    }
    Ok(manifest)
}
