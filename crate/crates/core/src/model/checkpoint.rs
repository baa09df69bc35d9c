//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries the schema tag, the model config and the trainer state.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{CompressionModel, ModelConfig, Role};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: u32 = 1;

const KEY_SCHEMA: &str = "kdlic.schema";
const KEY_CONFIG: &str = "kdlic.model_config";
const KEY_TRAINER: &str = "kdlic.trainer_state";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerSnapshot {
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: CompressionModel,
    pub trainer: Option<TrainerSnapshot>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &CompressionModel,
    trainer: Option<TrainerSnapshot>,
) -> Result<()> {
    let path = path.as_ref();
    let mut metadata = HashMap::new();
    metadata.insert(KEY_SCHEMA.to_string(), CHECKPOINT_SCHEMA.to_string());
    metadata.insert(KEY_CONFIG.to_string(), serde_json::to_string(model.config())?);
    if let Some(t) = trainer {
        metadata.insert(KEY_TRAINER.to_string(), serde_json::to_string(&t)?);
    }
    let tensors: Vec<(String, Tensor)> =
        model.params().iter().map(|(name, var)| (name.to_string(), var.as_tensor().clone())).collect();
    let views: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    safetensors::serialize_to_file(views, Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

fn read_metadata(bytes: &[u8]) -> Result<HashMap<String, String>> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("bad archive header: {e}")))?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Loads a checkpoint into a model of the stored config and the given dtype.
pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let meta = read_metadata(&bytes)?;
    let schema: u32 = meta
        .get(KEY_SCHEMA)
        .ok_or_else(|| Error::Checkpoint(format!("{} has no schema tag", path.display())))?
        .parse()
        .map_err(|_| Error::Checkpoint("schema tag is not an integer".into()))?;
    if schema != CHECKPOINT_SCHEMA {
        return Err(Error::SchemaVersion { found: schema, expected: CHECKPOINT_SCHEMA });
    }
    let config: ModelConfig =
        serde_json::from_str(meta.get(KEY_CONFIG).ok_or_else(|| Error::Checkpoint("missing model config".into()))?)?;
    let trainer = meta.get(KEY_TRAINER).map(|s| serde_json::from_str(s)).transpose()?;
    let model = CompressionModel::new(&config, 0, dtype, &Device::Cpu)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    assign_all(&model, &tensors, false)?;
    Ok(Checkpoint { model, trainer })
}

/// Loads either a checkpoint written by [`save_checkpoint`] or an external
/// scale-hyperprior state dict (see [`super::import`]), telling them apart by
/// the schema tag in the archive header.
pub fn load_model_file(path: impl AsRef<Path>, role: Role, dtype: DType) -> Result<CompressionModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if read_metadata(&bytes)?.contains_key(KEY_SCHEMA) {
        Ok(load_checkpoint(path, dtype)?.model)
    } else {
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        super::import::import_state_dict(tensors, role, dtype)
    }
}

/// Copies named tensors into `model`. Every model parameter must be present;
/// unknown names are an error unless `allow_extra` is set.
pub(crate) fn assign_all(model: &CompressionModel, tensors: &HashMap<String, Tensor>, allow_extra: bool) -> Result<()> {
    let missing: Vec<&str> = model.params().iter().map(|(n, _)| n).filter(|n| !tensors.contains_key(*n)).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing parameters: {missing:?}")));
    }
    if !allow_extra {
        let mut extra: Vec<&String> = tensors.keys().filter(|k| model.params().get(k).is_none()).collect();
        if !extra.is_empty() {
            extra.sort();
            return Err(Error::Checkpoint(format!("unexpected tensors: {extra:?}")));
        }
    }
    for (name, _) in model.params().iter() {
        model.params().assign(name, &tensors[name])?;
    }
    Ok(())
}
