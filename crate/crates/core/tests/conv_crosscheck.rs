//! Conv and transposed-conv layers against reference outputs over a range
//! of small spatial sizes (fixture written by
//! `scripts/export_compressai.py layers`).

use candle_core::{DType, Device, Tensor};
use kdlic::model::layers::{Conv2d, ConvTranspose2d};
use kdlic::model::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/conv_cases.safetensors");

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn layers_match_reference_for_all_sizes() {
    let all = candle_core::safetensors::load(FIXTURE, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cases = 0;
    for size in [1, 2, 3, 4, 5, 8, 13, 16] {
        for (kernel, stride) in [(3, 1), (5, 2)] {
            let name = format!("s{size}_k{kernel}_st{stride}");
            let x = &all[&format!("{name}.x")];
            let bias = &all[&format!("{name}.bias")];

            let mut ps = ParamStore::new(DType::F64, Device::Cpu);
            let conv = Conv2d::new(&mut ps, "c", 4, 6, kernel, stride, &mut rng).unwrap();
            ps.assign("c.weight", &all[&format!("{name}.conv.weight")]).unwrap();
            ps.assign("c.bias", bias).unwrap();
            let d = max_abs_diff(&conv.forward(x).unwrap(), &all[&format!("{name}.conv.out")]);
            assert!(d < 1e-10, "{name} conv: {d}");

            let mut ps = ParamStore::new(DType::F64, Device::Cpu);
            let deconv = ConvTranspose2d::new(&mut ps, "d", 4, 6, kernel, stride, &mut rng).unwrap();
            ps.assign("d.weight", &all[&format!("{name}.deconv.weight")]).unwrap();
            ps.assign("d.bias", bias).unwrap();
            let d = max_abs_diff(&deconv.forward(x).unwrap(), &all[&format!("{name}.deconv.out")]);
            assert!(d < 1e-10, "{name} deconv: {d}");
            cases += 1;
        }
    }
    assert_eq!(cases, 16);
}
