//! FLOP tables and measurement self-consistency.

use std::sync::{Mutex, MutexGuard};

use candle_core::{Device, Tensor};
use kdlic::model::{build_model, ModelConfig};
use kdlic::profiler::{count_flops, measure_throughput, profile_model, FlopConvention, NullMeter, ProxyMeter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Timing tests share the host with the other tests in this binary; hold
/// this to keep them from overlapping.
static EXCLUSIVE: Mutex<()> = Mutex::new(());

fn exclusive() -> MutexGuard<'static, ()> {
    EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner())
}

const WIDTHS: [usize; 6] = [16, 32, 64, 96, 112, 128];
/// Reference GFLOPs per 768x512 frame for the widths above.
const GFLOPS: [f64; 6] = [1.02, 2.98, 9.67, 20.10, 26.70, 34.24];

fn config(n: usize) -> ModelConfig {
    if n == 128 {
        ModelConfig::teacher()
    } else {
        ModelConfig::student(n)
    }
}

#[test]
fn gflops_match_reference_table() {
    let _guard = exclusive();
    let mut got = Vec::new();
    for (i, &n) in WIDTHS.iter().enumerate() {
        let m = build_model(&config(n), 0).unwrap();
        let g = count_flops(&m, 512, 768).unwrap().gflops(FlopConvention::MacAsOne);
        assert!((g / GFLOPS[i] - 1.0).abs() <= 0.05, "N={n}: {g:.3} vs {}", GFLOPS[i]);
        got.push(g);
    }
    let ratio = got[0] / got[5];
    assert!(ratio <= 0.035, "student-16 / teacher = {ratio}");
}

#[test]
fn flops_are_repeatable_and_increase_with_width() {
    let _guard = exclusive();
    let mut previous = 0;
    for n in WIDTHS {
        let m = build_model(&config(n), 0).unwrap();
        let a = count_flops(&m, 512, 768).unwrap();
        let b = count_flops(&build_model(&config(n), 99).unwrap(), 512, 768).unwrap();
        assert_eq!(a, b);
        let f = a.flops(FlopConvention::TwoPerMac);
        assert!(f > previous, "N={n}");
        previous = f;
    }
}

#[test]
fn two_per_mac_doubles_only_the_macs() {
    let _guard = exclusive();
    let m = build_model(&ModelConfig::student(16), 0).unwrap();
    let f = count_flops(&m, 256, 256).unwrap();
    assert_eq!(f.flops(FlopConvention::TwoPerMac) - f.flops(FlopConvention::MacAsOne), f.macs);
}

fn frames(n: usize, side: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..3 * side * side).map(|_| rng.gen()).collect();
            Tensor::from_vec(v, (1, 3, side, side), &Device::Cpu).unwrap()
        })
        .collect()
}

#[test]
fn throughput_is_stable_across_pass_counts() {
    let _guard = exclusive();
    let model = build_model(&ModelConfig::student(8), 0).unwrap();
    let set = frames(4, 64);
    // best of three single-pass runs against one long run
    let one = (0..3).map(|_| measure_throughput(&model, &set, 1).unwrap().fps).fold(0.0, f64::max);
    let many = measure_throughput(&model, &set, 50).unwrap().fps;
    let rel = (one - many).abs() / many;
    assert!(rel <= 0.15, "1 pass {one:.1} fps vs 50 passes {many:.1} fps");
}

#[test]
fn proxy_energy_agrees_with_power_over_throughput() {
    let _guard = exclusive();
    let model = build_model(&ModelConfig::student(8), 0).unwrap();
    let set = frames(2, 64);
    let watts = 50.0;
    let mut meter = ProxyMeter::new(watts).unwrap();
    let r = profile_model("s8", &model, &set, (64, 64), &mut meter, 5, FlopConvention::MacAsOne).unwrap();
    let e = r.energy_mj_per_frame.unwrap();
    assert!(r.energy_estimated);
    let expected = watts / r.throughput_fps * 1e3;
    assert!((e / expected - 1.0).abs() <= 0.2, "{e} vs {expected}");
    assert!(r.params_m > 0.0 && r.memory_mb > 0.0 && r.gflops_per_frame > 0.0 && r.passes == 5);
}

#[test]
fn null_meter_omits_energy() {
    let _guard = exclusive();
    let model = build_model(&ModelConfig::student(8), 0).unwrap();
    let r = profile_model("s8", &model, &frames(1, 64), (64, 64), &mut NullMeter, 1, FlopConvention::MacAsOne).unwrap();
    assert_eq!(r.energy_mj_per_frame, None);
    assert!(r.throughput_fps > 0.0);
}
