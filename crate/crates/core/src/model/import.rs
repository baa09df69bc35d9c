//! Import of externally trained scale-hyperprior weights.
//!
//! The input is a safetensors archive holding a CompressAI-style
//! `ScaleHyperprior` state dict (see `scripts/export_compressai.py`).
//! Parameter names map one-to-one onto this crate's names; entropy-coder
//! buffers (CDF tables, offsets, reparameterization constants) are dropped.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::checkpoint::assign_all;
use super::{CompressionModel, ModelConfig, Role};
use crate::error::{Error, Result};

const BUFFER_SUFFIXES: &[&str] =
    &["._offset", "._quantized_cdf", "._cdf_length", ".target", ".pedestal", ".bound", ".scale_table", ".scale_bound"];

fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

fn dim(tensors: &HashMap<String, Tensor>, name: &str, axis: usize) -> Result<usize> {
    let t = tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("state dict lacks {name}")))?;
    t.dims().get(axis).copied().ok_or_else(|| Error::Checkpoint(format!("{name} has shape {:?}", t.dims())))
}

/// Reads N, M, the hyper-latent width and the prior filter widths off the tensor shapes.
pub fn infer_config(tensors: &HashMap<String, Tensor>, role: Role) -> Result<ModelConfig> {
    let channels_n = dim(tensors, "g_a.0.weight", 0)?;
    let latent_m = dim(tensors, "g_a.6.weight", 0)?;
    let hyper = dim(tensors, "h_a.4.weight", 0)?;
    let mut prior_filters = Vec::new();
    let mut i = 0;
    while let Some(m) = tensors.get(&format!("entropy_bottleneck.matrices.{i}")) {
        if let Some(&out) = m.dims().get(1) {
            prior_filters.push(out);
        }
        i += 1;
    }
    // the last matrix maps back to a single output
    prior_filters.pop();
    let mut config = ModelConfig::new(channels_n, latent_m, hyper, role);
    config.prior_filters = prior_filters;
    config.validate()?;
    Ok(config)
}

pub fn import_state_dict(tensors: HashMap<String, Tensor>, role: Role, dtype: DType) -> Result<CompressionModel> {
    let tensors: HashMap<String, Tensor> = tensors.into_iter().filter(|(k, _)| !is_buffer(k)).collect();
    let config = infer_config(&tensors, role)?;
    let model = CompressionModel::new(&config, 0, dtype, &Device::Cpu)?;
    assign_all(&model, &tensors, false)?;
    Ok(model)
}

pub fn import_safetensors(path: impl AsRef<Path>, role: Role, dtype: DType) -> Result<CompressionModel> {
    let path = path.as_ref();
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    import_state_dict(tensors, role, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_own_parameters_and_ignores_buffers() {
        let src =
            CompressionModel::new(&ModelConfig::new(4, 5, 3, Role::Teacher), 9, DType::F32, &Device::Cpu).unwrap();
        let mut tensors: HashMap<String, Tensor> =
            src.params().iter().map(|(n, v)| (n.to_string(), v.as_tensor().clone())).collect();
        tensors.insert(
            "gaussian_conditional._quantized_cdf".into(),
            Tensor::zeros((2, 7), DType::F32, &Device::Cpu).unwrap(),
        );
        let imported = import_state_dict(tensors, Role::Teacher, DType::F32).unwrap();
        assert_eq!(imported.config(), src.config());
        assert_eq!(imported.params().fingerprint().unwrap(), src.params().fingerprint().unwrap());
    }

    #[test]
    fn unknown_tensor_is_rejected() {
        let src =
            CompressionModel::new(&ModelConfig::new(2, 3, 2, Role::Teacher), 9, DType::F32, &Device::Cpu).unwrap();
        let mut tensors: HashMap<String, Tensor> =
            src.params().iter().map(|(n, v)| (n.to_string(), v.as_tensor().clone())).collect();
        tensors.insert("context_prediction.weight".into(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        let err = import_state_dict(tensors, Role::Teacher, DType::F32).unwrap_err();
        assert!(err.to_string().contains("context_prediction"));
    }
}
