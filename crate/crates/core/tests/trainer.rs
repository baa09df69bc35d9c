//! Training loop contracts on small synthetic data.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use kdlic::data::{index_directory, write_manifest, PatchDataset};
use kdlic::losses::{kd_loss_l1, KdWeights};
use kdlic::model::checkpoint::{load_checkpoint, save_checkpoint};
use kdlic::model::{build_model, CompressionModel, ForwardMode, ModelConfig, Role};
use kdlic::trainer::{
    parameter_checksum, train, TrainConfig, Trainer, DIAGNOSTIC_CHECKPOINT, LATEST_CHECKPOINT, LOG_FILE,
};
use kdlic::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CROP: u32 = 64;

/// Smooth random colour fields with a few hard edges.
fn synthetic_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    let f: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [rng.gen_range(0.02..0.15), rng.gen_range(0.02..0.15), rng.gen_range(0.0..6.3), rng.gen_range(0.2..0.8)]
        })
        .collect();
    let (x0, y0, x1, y1) =
        (rng.gen_range(0..w / 2), rng.gen_range(0..h / 2), rng.gen_range(w / 2..w), rng.gen_range(h / 2..h));
    let shade: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    RgbImage::from_fn(w, h, |x, y| {
        let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
        let mut px = [0u8; 3];
        for c in 0..3 {
            let [fx, fy, ph, base] = f[c];
            let v = if inside { shade[c] } else { base + 0.3 * (fx * x as f64 + fy * y as f64 + ph).sin() };
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

fn toy_set(dir: &Path, count: usize) -> PatchDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for i in 0..count {
        synthetic_image(&mut rng, 80, 72).save(dir.join(format!("img{i:03}.png"))).unwrap();
    }
    write_manifest(dir, &index_directory(dir).unwrap()).unwrap();
    PatchDataset::open(dir, CROP, 7).unwrap()
}

fn student(seed: u64) -> CompressionModel {
    build_model(&ModelConfig::new(8, 16, 8, Role::Student), seed).unwrap()
}

fn config(steps: u64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(steps, 0.0130);
    c.batch_size = 2;
    c.crop = CROP;
    c.seed = seed;
    c.eval_interval = 1000;
    c.validation_batches = 2;
    c
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_set(dir.path(), 4);
    let model = student(0);
    let before = parameter_checksum(&model).unwrap();
    let (trained, state) = train(model, &ds, config(0, 0)).unwrap();
    assert_eq!(parameter_checksum(&trained).unwrap(), before);
    assert_eq!(state.step, 0);
}

#[test]
fn identical_runs_have_identical_loss_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_set(dir.path(), 8);
    let (_, a) = train(student(3), &ds, config(100, 11)).unwrap();
    let (_, b) = train(student(3), &ds, config(100, 11)).unwrap();
    assert_eq!(a.losses.len(), 100);
    assert_eq!(a.losses, b.losses);
    let (_, c) = train(student(3), &ds, config(5, 12)).unwrap();
    assert_ne!(a.losses[..5], c.losses[..]);
}

#[test]
fn rd_training_lowers_eval_loss_for_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_set(dir.path(), 100);
    for seed in 0..3 {
        let (_, state) = train(student(seed), &ds, config(2000, seed)).unwrap();
        let first = state.history.first().unwrap();
        let last = state.history.last().unwrap();
        assert_eq!((first.step, last.step), (0, 2000));
        assert!(last.eval_loss < first.eval_loss, "seed {seed}: {} -> {}", first.eval_loss, last.eval_loss);
        for w in state.history.windows(2) {
            assert!(w[1].step > w[0].step);
        }
    }
}

fn teacher() -> CompressionModel {
    build_model(&ModelConfig::new(12, 16, 12, Role::Teacher), 50).unwrap()
}

fn kd_config(steps: u64) -> TrainConfig {
    let mut c = config(steps, 4);
    c.kd = Some(KdWeights::default_l1(c.rd_lambda));
    c
}

#[test]
fn teachers_are_unchanged_by_distillation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_set(dir.path(), 6);
    let t = teacher();
    let before = parameter_checksum(&t).unwrap();
    let kept = t.clone();
    let trainer = Trainer::with_teachers(student(1), kd_config(20), vec![t]).unwrap();
    let (trained, state) = trainer.run(&ds).unwrap();
    assert_eq!(state.teacher_checksums, vec![before.clone()]);
    assert_eq!(parameter_checksum(&kept).unwrap(), before);
    assert_ne!(parameter_checksum(&trained).unwrap(), parameter_checksum(&student(1)).unwrap());
}

#[test]
fn distillation_gradients_reach_only_the_student() {
    let s = student(2);
    let t = teacher();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v: Vec<f32> = (0..2 * 3 * 64 * 64).map(|_| rng.gen()).collect();
    let x = Tensor::from_vec(v, (2, 3, 64, 64), &Device::Cpu).unwrap();
    let targets = t.distillation_targets(&x).unwrap();
    let out = s.forward(&x, ForwardMode::Train, &mut rng).unwrap();
    let loss = kd_loss_l1(&out, &targets, &x, &KdWeights::default_l1(0.013)).unwrap();
    let grads = loss.total.backward().unwrap();
    for v in s.main_vars() {
        let g = grads.get(v.as_tensor()).expect("student parameter without gradient");
        let n = g.abs().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!(n > 0.0);
    }
    for (name, v) in t.params().iter() {
        assert!(grads.get(v.as_tensor()).is_none(), "teacher parameter {name} received a gradient");
    }
}

#[test]
fn latent_width_mismatch_fails_before_any_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let wrong = build_model(&ModelConfig::new(12, 24, 12, Role::Teacher), 0).unwrap();
    let teacher_path = dir.path().join("teacher.safetensors");
    save_checkpoint(&teacher_path, &wrong, None).unwrap();

    let mut c = kd_config(10);
    c.teacher_checkpoints = vec![teacher_path];
    c.output_dir = Some(out.clone());
    match Trainer::new(student(0), c) {
        Err(Error::DistillationCompat(msg)) => assert!(msg.contains("24"), "{msg}"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("accepted an incompatible teacher"),
    }
    assert!(!out.join(LOG_FILE).exists());
}

#[test]
fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let ds = toy_set(&data, 3);
    let model = student(0);
    let bias = model.params().get("g_s.6.bias").unwrap();
    bias.set(&Tensor::full(f32::NAN, bias.dims(), &Device::Cpu).unwrap()).unwrap();
    let mut c = config(5, 0);
    c.output_dir = Some(dir.path().join("run"));
    let mut trainer = Trainer::with_teachers(model, c, vec![]).unwrap();
    let batch = ds.sample_batch(0, 2, &Device::Cpu).unwrap();
    match trainer.step(&batch) {
        Err(Error::TrainingAborted { step, reason }) => {
            assert_eq!(step, 0);
            assert!(reason.contains("non-finite"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
    let diag = load_checkpoint(dir.path().join("run").join(DIAGNOSTIC_CHECKPOINT), DType::F32).unwrap();
    assert_eq!(diag.trainer.unwrap().step, 0);
}

#[test]
fn checkpoints_and_log_follow_the_evaluation_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let ds = toy_set(&data, 4);
    let out = dir.path().join("run");
    let mut c = config(6, 0);
    c.eval_interval = 4;
    c.output_dir = Some(out.clone());
    let (trained, state) = train(student(0), &ds, c).unwrap();

    let steps: Vec<u64> = state.history.iter().map(|h| h.step).collect();
    assert_eq!(steps, [0, 4, 6]);
    let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "step").count(), 6);
    assert_eq!(kinds.iter().filter(|k| *k == "eval").count(), 3);

    let ck = load_checkpoint(out.join(LATEST_CHECKPOINT), DType::F32).unwrap();
    assert_eq!(ck.trainer.unwrap().step, 6);
    let probe = ds.sample_batch(99, 1, &Device::Cpu).unwrap();
    let a = trained.forward_eval(&probe).unwrap().x_hat;
    let b = ck.model.forward_eval(&probe).unwrap().x_hat;
    let diff = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(diff, 0.0);
}

#[test]
fn two_teachers_train_a_hybrid_student() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_set(dir.path(), 4);
    // only teacher b supplies the hyper-latent target, so only its width must match
    let a = build_model(&ModelConfig::new(12, 16, 16, Role::Teacher), 50).unwrap();
    let b = build_model(&ModelConfig::new(10, 16, 12, Role::Teacher), 51).unwrap();
    let student = || build_model(&ModelConfig::new(8, 16, 12, Role::Student), 5).unwrap();
    let sums = [parameter_checksum(&a).unwrap(), parameter_checksum(&b).unwrap()];
    let mut c = config(4, 0);
    c.kd = Some(KdWeights::l2(0.2, 0.2, 0.2, 0.4, c.rd_lambda));
    let trainer = Trainer::with_teachers(student(), c.clone(), vec![a.clone(), b.clone()]).unwrap();
    let (_, state) = trainer.run(&ds).unwrap();
    assert_eq!(state.losses.len(), 4);
    assert!(state.losses.iter().all(|l| l.is_finite()));
    assert_eq!(state.teacher_checksums, sums);

    // the single-latent form has no slot for a second teacher
    c.kd = Some(KdWeights::default_l1(c.rd_lambda));
    assert!(Trainer::with_teachers(student(), c.clone(), vec![a.clone(), b.clone()]).is_err());
    c.kd = Some(KdWeights::l2(0.2, 0.2, 0.2, 0.4, c.rd_lambda));
    assert!(matches!(Trainer::with_teachers(student(), c, vec![b, a]), Err(Error::DistillationCompat(_))));
}
