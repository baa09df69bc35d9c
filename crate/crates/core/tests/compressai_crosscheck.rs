//! Eval-mode forward of an imported reference model against outputs the
//! reference implementation produced for the same weights and input
//! (fixture written by `scripts/export_compressai.py random`).

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use kdlic::model::import::import_state_dict;
use kdlic::model::Role;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/compressai_small.safetensors");

fn load() -> (kdlic::model::CompressionModel, HashMap<String, Tensor>) {
    let all = candle_core::safetensors::load(FIXTURE, &Device::Cpu).unwrap();
    let (probe, weights): (HashMap<_, _>, HashMap<_, _>) = all.into_iter().partition(|(k, _)| k.starts_with("probe."));
    let model = import_state_dict(weights, Role::Teacher, DType::F64).unwrap();
    (model, probe)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn imported_config_matches_fixture() {
    let (model, _) = load();
    let c = model.config();
    assert_eq!((c.channels_n, c.latent_m, c.hyper_out_channels), (8, 12, 8));
    assert_eq!(c.prior_filters, vec![3, 3, 3, 3]);
}

#[test]
fn eval_forward_matches_reference_outputs() {
    let (model, probe) = load();
    let x = &probe["probe.x"];
    let out = model.forward_eval(x).unwrap();

    assert!(max_abs_diff(&out.y, &probe["probe.y"]) < 1e-10);
    assert!(max_abs_diff(&out.y_hat, &probe["probe.y_hat"]) == 0.0);
    assert!(max_abs_diff(&out.y_likelihoods, &probe["probe.y_likelihoods"]) < 1e-9);
    assert!(max_abs_diff(&out.z_likelihoods, &probe["probe.z_likelihoods"]) < 1e-9);
    let reference_x_hat = probe["probe.x_hat"].clamp(0.0, 1.0).unwrap();
    assert!(max_abs_diff(&out.x_hat, &reference_x_hat) < 1e-10);
}

#[test]
fn auxiliary_loss_matches_reference() {
    let (model, probe) = load();
    let ours = model.aux_loss().unwrap().to_scalar::<f64>().unwrap();
    let theirs = probe["probe.aux_loss"].flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
    // the reference keeps its tail target in f32; allow that rounding per
    // outer quantile
    let t = (2.0f64 / 1e-9 - 1.0).ln();
    let rounding = (t - t as f32 as f64).abs();
    let channels = model.config().hyper_out_channels as f64;
    let budget = 2.0 * channels * rounding + 1e-9;
    assert!((ours - theirs).abs() <= budget, "{ours} vs {theirs}");
}
