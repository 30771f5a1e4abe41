//! Checkpoints: `manifest.json` plus one little-endian f32 blob `params.f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hemulab_geo::raster::{f32_from_le_bytes, f32_to_le_bytes};

use crate::model::{Model, ModelConfig, ModelKind};
use crate::{Error, Result};

pub const FORMAT: &str = "hemulab-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model_kind: ModelKind,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub seed: u64,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn save(dir: &Path, model: &Model, seed: u64, metadata: BTreeMap<String, serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (_, name, t) in model.params().iter() {
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: blob.len(), len: t.numel() });
        blob.extend(f32_to_le_bytes(t.data()));
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        model_kind: model.kind(),
        config: model.config(),
        params: entries,
        seed,
        metadata,
    };
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Rebuilds the model from its config and fills in stored values; every
/// parameter name and shape must match the architecture exactly.
pub fn load(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
    }
    if manifest.model_kind != manifest.config.kind() {
        return Err(Error::Checkpoint("model_kind disagrees with config".into()));
    }
    let values = f32_from_le_bytes(&fs::read(dir.join(BLOB_FILE))?)?;
    let mut model = Model::new(&manifest.config, manifest.seed)?;
    let ps = model.params_mut();
    if ps.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, architecture expects {}",
            manifest.params.len(),
            ps.len()
        )));
    }
    for (i, e) in manifest.params.iter().enumerate() {
        let id = hemulab_tensor::ParamId(i);
        if ps.name(id) != e.name || ps.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: stored {} {:?}, expected {} {:?}",
                e.name,
                e.shape,
                ps.name(id),
                ps.get(id).shape()
            )));
        }
        if e.offset % 4 != 0 || e.offset / 4 + e.len > values.len() || e.len != ps.get(id).numel() {
            return Err(Error::Checkpoint(format!("tensor {} has a bad blob range", e.name)));
        }
        ps.get_mut(id).data_mut().copy_from_slice(&values[e.offset / 4..e.offset / 4 + e.len]);
    }
    Ok((model, manifest))
}
