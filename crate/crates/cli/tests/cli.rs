//! The `kdlic` binary end to end: exit codes, outputs and reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use kdlic::metrics::results::{read_results, write_results, Provenance, ResultRecord};
use kdlic::metrics::RDPoint;
use kdlic::model::checkpoint::save_checkpoint;
use kdlic::model::{build_model, ModelConfig, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn kdlic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlic")).args(args).env_remove("RUST_LOG").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn picture(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy): (f64, f64) = (rng.gen_range(0.02..0.1), rng.gen_range(0.02..0.1));
    RgbImage::from_fn(w, h, |x, y| {
        let v = |c: f64| (127.5 + 100.0 * ((fx + c) * x as f64).sin() * (fy * y as f64).cos()) as u8;
        Rgb([v(0.0), v(0.01), v(0.02)])
    })
}

fn image_dir(root: &Path, count: u64, w: u32, h: u32) -> PathBuf {
    std::fs::create_dir_all(root).unwrap();
    for i in 0..count {
        picture(i, w, h).save(root.join(format!("im{i:02}.png"))).unwrap();
    }
    root.to_path_buf()
}

/// A tiny student setup: train and eval images, a config, and a teacher.
struct Setup {
    dir: TempDir,
}

impl Setup {
    fn new(kd: bool) -> Self {
        let dir = TempDir::new().unwrap();
        let train = image_dir(&dir.path().join("train"), 6, 72, 72);
        image_dir(&dir.path().join("eval"), 2, 64, 64);
        assert_eq!(code(&kdlic(&["index", s(&train)])), 0);
        let teacher = build_model(&ModelConfig::new(12, 16, 8, Role::Teacher), 3).unwrap();
        save_checkpoint(dir.path().join("teacher.safetensors"), &teacher, None).unwrap();
        let kd_section = if kd { "[kd]\nlambda1 = 0.2\nlambda2 = 0.2\nlambda3 = 0.4\n" } else { "" };
        let teachers = if kd { "teachers = [\"teacher.safetensors\"]" } else { "" };
        let text = format!(
            "tag = \"tiny\"\noutput_dir = \"runs\"\n\n[model]\nchannels_n = 8\nlatent_m = 16\n\n\
             [train]\nsteps = 3\nrd_lambda = 0.5\nbatch_size = 2\ncrop = 64\neval_interval = 2\nvalidation_batches = 1\n\n\
             {kd_section}\n[data]\ntrain_root = \"train\"\neval_root = \"eval\"\n{teachers}\n"
        );
        std::fs::write(dir.path().join("exp.toml"), text).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, extra: &[&str]) -> Output {
        let config = self.path("exp.toml");
        let mut args = vec!["train", "--config", s(&config)];
        args.extend_from_slice(extra);
        kdlic(&args)
    }
}

#[test]
fn rd_quality_flag_selects_the_multiplier() {
    let setup = Setup::new(false);
    for (q, lambda) in [("5", "0.025"), ("1", "0.0018")] {
        let o = setup.train(&["--rd-quality", q, "--steps", "0", "--tag", &format!("q{q}")]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains(&format!("at lambda {lambda},")), "{}", stdout(&o));
        let resolved = std::fs::read_to_string(setup.path(&format!("runs/q{q}/experiment.toml"))).unwrap();
        assert!(resolved.contains(&format!("rd_quality = {q}")), "{resolved}");
    }
    let o = setup.train(&["--rd-quality", "9", "--tag", "q9"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("quality"));
    assert!(!setup.path("runs/q9").exists());
}

#[test]
fn distilled_training_run_evaluates_and_checkpoints() {
    let setup = Setup::new(true);
    let o = setup.train(&[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = setup.path("runs/tiny");
    for f in ["experiment.toml", "train_log.jsonl", "checkpoint_latest.safetensors", "results.jsonl"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let records = read_results(run.join("results.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].provenance().model_id, "tiny");

    // the tag is taken now
    assert_eq!(code(&setup.train(&[])), 1);

    let ckpt = run.join("checkpoint_latest.safetensors");
    let eval_root = setup.path("eval");
    let outputs: Vec<Vec<u8>> = ["a.jsonl", "b.jsonl"]
        .iter()
        .map(|name| {
            let out = setup.path(name);
            let o = kdlic(&["eval", "--checkpoint", s(&ckpt), "--eval-root", s(&eval_root), "--out", s(&out)]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            std::fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);

    let missing = setup.path("nope.safetensors");
    let o = kdlic(&["eval", "--checkpoint", s(&missing), "--eval-root", s(&eval_root), "--out", "x"]);
    assert_eq!(code(&o), 1);
}

fn curve_file(path: &Path, id: &str, shift_db: f64) {
    let records: Vec<ResultRecord> = [(0.2, 28.0), (0.4, 31.0), (0.7, 33.5), (1.1, 35.5)]
        .iter()
        .enumerate()
        .map(|(i, &(bpp, psnr))| {
            ResultRecord::rd(
                Provenance { model_id: id.into(), config_hash: "0".into(), commit: "test".into() },
                RDPoint { bpp, psnr: psnr + shift_db, msssim: None, label: format!("q{i}") },
            )
        })
        .collect();
    write_results(path, &records).unwrap();
}

/// Signed number following `prefix` in the bd output.
fn bd_value(out: &str, prefix: &str) -> f64 {
    let line = out.lines().find(|l| l.starts_with(prefix)).unwrap();
    line[prefix.len()..].split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn bd_reports_identity_and_shift() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    curve_file(&a, "ref", 0.0);
    curve_file(&b, "up", 1.0);

    let o = kdlic(&["bd", s(&a), s(&a)]);
    assert_eq!(code(&o), 0);
    assert!(bd_value(&stdout(&o), "BD-rate:").abs() < 1e-6, "{}", stdout(&o));
    assert!(bd_value(&stdout(&o), "BD-PSNR:").abs() < 1e-6);

    let o = kdlic(&["bd", s(&a), s(&b), "--fit", "pchip"]);
    assert_eq!(code(&o), 0);
    assert!((bd_value(&stdout(&o), "BD-PSNR:") - 1.0).abs() < 1e-6, "{}", stdout(&o));
    assert!(bd_value(&stdout(&o), "BD-rate:") < 0.0);
    assert_eq!(stdout(&o), stdout(&kdlic(&["bd", s(&a), s(&b), "--fit", "pchip"])));

    let far = dir.path().join("far.jsonl");
    curve_file(&far, "far", 20.0);
    let o = kdlic(&["bd", s(&a), s(&far)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap"));
}

#[test]
fn plot_writes_one_figure_per_curve_set() {
    let dir = TempDir::new().unwrap();
    let results = dir.path().join("r.jsonl");
    curve_file(&results, "ref", 0.0);
    let figs = dir.path().join("figs");
    let o = kdlic(&["plot", s(&results), "--out-dir", s(&figs)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<_> = std::fs::read_dir(&figs).unwrap().collect();
    assert_eq!(files.len(), 1);
    let first = std::fs::read(figs.join("rd.svg")).unwrap();
    assert_eq!(code(&kdlic(&["plot", s(&results), "--out-dir", s(&figs)])), 0);
    assert_eq!(first, std::fs::read(figs.join("rd.svg")).unwrap());

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let none = dir.path().join("none");
    let o = kdlic(&["plot", s(&empty), "--out-dir", s(&none)]);
    assert_eq!(code(&o), 1);
    assert!(!none.exists());
}

#[test]
fn codec_sweep_and_profile_write_records() {
    let dir = TempDir::new().unwrap();
    let eval = image_dir(&dir.path().join("eval"), 2, 96, 64);
    let out = dir.path().join("jpeg.jsonl");
    let timing = dir.path().join("timing.jsonl");
    let o = kdlic(&[
        "codec-sweep",
        "--codec",
        "jpeg",
        "--qualities",
        "20,50,90",
        "--eval-root",
        s(&eval),
        "--out",
        s(&out),
        "--passes",
        "1",
        "--meter",
        "proxy:20",
        "--profile-out",
        s(&timing),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_results(&out).unwrap().len(), 3);
    assert_eq!(std::fs::read_to_string(&timing).unwrap().lines().count(), 3);

    let o = kdlic(&["codec-sweep", "--codec", "png", "--qualities", "5", "--eval-root", s(&eval), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let o = kdlic(&["codec-sweep", "--codec", "jpeg", "--qualities", "0", "--eval-root", s(&eval), "--out", s(&out)]);
    assert_eq!(code(&o), 1);

    let prof = dir.path().join("prof.jsonl");
    let o = kdlic(&[
        "profile",
        "--width",
        "8",
        "--input-shape",
        "64x64",
        "--frames",
        "1",
        "--passes",
        "1",
        "--meter",
        "proxy:30",
        "--out",
        s(&prof),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("(estimated)"));
    match &read_results(&prof).unwrap()[0] {
        ResultRecord::Profile(r) => assert_eq!((r.report.model_id.as_str(), r.report.passes), ("N8", 1)),
        other => panic!("{other:?}"),
    }
    let o = kdlic(&["profile", "--width", "8", "--input-shape", "64by64"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&kdlic(&[])), 1);
    assert_eq!(code(&kdlic(&["train"])), 1);
    assert_eq!(code(&kdlic(&["train", "--config", "/does/not/exist.toml"])), 1);
    assert_eq!(code(&kdlic(&["--help"])), 0);
    assert_eq!(code(&kdlic(&["--version"])), 0);
}
