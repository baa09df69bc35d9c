//! Subcommand implementations. Each returns the text it prints, so runs can
//! be compared byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use kdlic::data::{index_directory, load_eval_set, write_manifest, PatchDataset};
use kdlic::metrics::bd::{bd_psnr_with, bd_rate_with, BdFit, BdOptions, BdOutcome};
use kdlic::metrics::results::{
    append_results, config_hash, curves, read_results, write_results, Provenance, ResultRecord,
};
use kdlic::metrics::{evaluate_model, RDCurve, RDPoint};
use kdlic::model::checkpoint::load_model_file;
use kdlic::model::{build_model, CompressionModel, ModelConfig, Role};
use kdlic::profiler::{profile_model, FlopConvention, NullMeter, PowerMeter, ProxyMeter, RaplMeter};
use kdlic::trainer::Trainer;
use kdlic::{Error, Result};
use kdlic_codecs::{codec_rd_curve, profile_codec, CodecName, CodecReport, CodecSpec};

use crate::config::{ExperimentConfig, Overrides};

pub const COMMIT: &str = concat!("kdlic ", env!("CARGO_PKG_VERSION"));

fn require(field: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{} does not exist", path.display())))
    }
}

fn save(out: &Path, records: &[ResultRecord], append: bool) -> Result<()> {
    if append {
        append_results(out, records)
    } else {
        write_results(out, records)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn describe_point(p: &RDPoint) -> String {
    let ms = p.msssim.map(|m| format!(", MS-SSIM {m:.4}")).unwrap_or_default();
    format!("{:.4} bpp, PSNR {:.2} dB{ms}", p.bpp, p.psnr)
}

pub fn index(root: &Path) -> Result<String> {
    require("root", root)?;
    let manifest = index_directory(root)?;
    let path = write_manifest(root, &manifest)?;
    let (w, h) = manifest.entries.iter().fold((u32::MAX, u32::MAX), |(w, h), e| (w.min(e.width), h.min(e.height)));
    Ok(format!("indexed {} images (smallest side {}) into {}\n", manifest.entries.len(), w.min(h), path.display()))
}

pub fn train(config_path: &Path, overrides: &Overrides) -> Result<String> {
    require("config", config_path)?;
    let mut config = ExperimentConfig::load(config_path)?;
    config.apply(overrides);
    config.validate()?;
    let train_config = config.train_config()?;
    let dataset = PatchDataset::open(&config.data.train_root, train_config.crop, train_config.seed)?;
    let eval_set = config.data.eval_root.as_ref().map(|p| load_eval_set(p, &Device::Cpu)).transpose()?;

    let run_dir = config.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
    let resolved = toml::to_string(&config).map_err(|e| Error::config("config", e.to_string()))?;
    let cfg_path = run_dir.join("experiment.toml");
    std::fs::write(&cfg_path, resolved).map_err(|e| Error::io(format!("writing {}", cfg_path.display()), e))?;

    let model = build_model(&config.model_config(), config.model.init_seed)?;
    let rd_lambda = train_config.rd_lambda;
    let (model, state) = Trainer::new(model, train_config)?.run(&dataset)?;

    let mut out = String::new();
    let last = state.history.last().expect("run evaluates at least once");
    writeln!(
        out,
        "{}: {} steps at lambda {rd_lambda}, eval loss {:.5} ({:.4} bpp, {:.2} dB), lr {:.2e}",
        config.tag, state.step, last.eval_loss, last.bpp, last.psnr, state.lr
    )
    .unwrap();
    if let Some(set) = eval_set {
        let point = evaluate_model(&model, &set, format!("lambda={rd_lambda}"))?;
        let provenance =
            Provenance { model_id: config.tag.clone(), config_hash: config_hash(&config)?, commit: COMMIT.into() };
        let results = run_dir.join("results.jsonl");
        write_results(&results, &[ResultRecord::rd(provenance, point.clone())])?;
        writeln!(out, "final evaluation: {} -> {}", describe_point(&point), results.display()).unwrap();
    }
    Ok(out)
}

pub fn load_model(checkpoint: &Path, role: Role) -> Result<CompressionModel> {
    require("checkpoint", checkpoint)?;
    load_model_file(checkpoint, role, DType::F32)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub role: Role,
    pub eval_root: &'a Path,
    pub out: &'a Path,
    pub model_id: Option<String>,
    pub label: Option<String>,
    pub append: bool,
}

pub fn eval(a: EvalArgs<'_>) -> Result<String> {
    require("eval_root", a.eval_root)?;
    let model = load_model(a.checkpoint, a.role)?;
    let set = load_eval_set(a.eval_root, &Device::Cpu)?;
    let model_id = a.model_id.unwrap_or_else(|| stem(a.checkpoint));
    let point = evaluate_model(&model, &set, a.label.unwrap_or_else(|| model_id.clone()))?;
    let provenance =
        Provenance { model_id: model_id.clone(), config_hash: config_hash(model.config())?, commit: COMMIT.into() };
    save(a.out, &[ResultRecord::rd(provenance, point.clone())], a.append)?;
    Ok(format!("{model_id} on {} images: {}\n", set.len(), describe_point(&point)))
}

/// `proxy:<watts>`, `telemetry` or `none`.
pub fn parse_meter(spec: &str) -> Result<Box<dyn PowerMeter>> {
    match spec {
        "none" => Ok(Box::new(NullMeter)),
        "telemetry" => Ok(Box::new(RaplMeter::open()?)),
        s => match s.strip_prefix("proxy:").map(str::parse::<f64>) {
            Some(Ok(w)) => Ok(Box::new(ProxyMeter::new(w)?)),
            _ => Err(Error::config("meter", format!("`{s}` is not telemetry, proxy:<watts> or none"))),
        },
    }
}

/// `HxW`, e.g. `512x768`.
pub fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config("input_shape", format!("`{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

pub enum ModelSource<'a> {
    Checkpoint(&'a Path, Role),
    /// Randomly initialised student of width N, or the teacher at N = 128.
    Width(usize),
}

pub struct ProfileArgs<'a> {
    pub source: ModelSource<'a>,
    pub eval_root: Option<&'a Path>,
    pub frames: usize,
    pub input_shape: (usize, usize),
    pub passes: usize,
    pub meter: &'a str,
    pub convention: FlopConvention,
    pub model_id: Option<String>,
    pub out: Option<&'a Path>,
    pub append: bool,
}

pub fn profile(a: ProfileArgs<'_>) -> Result<String> {
    let mut meter = parse_meter(a.meter)?;
    let (model, default_id) = match a.source {
        ModelSource::Checkpoint(p, role) => (load_model(p, role)?, stem(p)),
        ModelSource::Width(n) => {
            let config = if n == 128 { ModelConfig::teacher() } else { ModelConfig::student(n) };
            (build_model(&config, 0)?, format!("N{n}"))
        }
    };
    let frames: Vec<Tensor> = match a.eval_root {
        Some(root) => {
            require("eval_root", root)?;
            load_eval_set(root, &Device::Cpu)?.into_iter().map(|im| im.pixels).collect()
        }
        None => {
            let (h, w) = a.input_shape;
            (0..a.frames.max(1))
                .map(|_| Tensor::rand(0f32, 1f32, (1, 3, h, w), &Device::Cpu))
                .collect::<candle_core::Result<_>>()?
        }
    };
    let model_id = a.model_id.unwrap_or(default_id);
    let r = profile_model(&model_id, &model, &frames, a.input_shape, meter.as_mut(), a.passes, a.convention)?;
    let mut out = String::new();
    writeln!(
        out,
        "{}: {:.4} M params, {:.3} MB, {:.3} GFLOPs/frame at {}x{}, {:.2} frames/s",
        r.model_id, r.params_m, r.memory_mb, r.gflops_per_frame, r.input_shape.0, r.input_shape.1, r.throughput_fps
    )
    .unwrap();
    if let Some(e) = r.energy_mj_per_frame {
        let tag = if r.energy_estimated { " (estimated)" } else { "" };
        writeln!(out, "energy: {e:.2} mJ/frame{tag} via {}", r.meter_desc).unwrap();
    }
    writeln!(out, "device: {}", r.device_desc).unwrap();
    if let Some(path) = a.out {
        let provenance = Provenance { model_id, config_hash: config_hash(model.config())?, commit: COMMIT.into() };
        save(path, &[ResultRecord::profile(provenance, r)], a.append)?;
    }
    Ok(out)
}

pub struct CodecArgs<'a> {
    pub codec: &'a str,
    pub qualities: &'a [u32],
    pub flags: &'a [String],
    pub eval_root: &'a Path,
    pub out: &'a Path,
    pub append: bool,
    pub passes: Option<usize>,
    pub meter: &'a str,
    pub profile_out: Option<&'a Path>,
}

pub fn codec_sweep(a: CodecArgs<'_>) -> Result<String> {
    require("eval_root", a.eval_root)?;
    let name = CodecName::parse(a.codec)?;
    if a.qualities.is_empty() {
        return Err(Error::config("qualities", "give at least one quality value"));
    }
    let mut specs = Vec::new();
    for &q in a.qualities {
        let mut spec = CodecSpec::new(name, q);
        for f in a.flags {
            let (k, v) = f.split_once('=').ok_or_else(|| Error::config("flag", format!("`{f}` is not key=value")))?;
            spec = spec.with_flag(k.trim(), v.trim());
        }
        spec.validate()?;
        specs.push(spec);
    }
    let set = load_eval_set(a.eval_root, &Device::Cpu)?;
    let sweep = codec_rd_curve(&set, &specs)?;
    let mut out = String::new();
    for w in &sweep.warnings {
        writeln!(out, "warning: {w}").unwrap();
    }
    let provenance =
        Provenance { model_id: sweep.curve.model_id.clone(), config_hash: config_hash(&specs)?, commit: COMMIT.into() };
    let records: Vec<ResultRecord> =
        sweep.curve.points.iter().map(|p| ResultRecord::rd(provenance.clone(), p.clone())).collect();
    for p in &sweep.curve.points {
        writeln!(out, "{}: {}", p.label, describe_point(p)).unwrap();
    }
    save(a.out, &records, a.append)?;

    if let Some(passes) = a.passes {
        let mut meter = parse_meter(a.meter)?;
        let mut seen: Vec<&CodecSpec> = Vec::new();
        let mut reports: Vec<CodecReport> = Vec::new();
        for s in &specs {
            if seen.contains(&s) {
                continue;
            }
            seen.push(s);
            let r = profile_codec(&set, s, meter.as_mut(), passes)?;
            let energy = r
                .energy_mj_per_frame
                .map(|e| format!(", {e:.2} mJ/frame{}", if r.energy_estimated { " (estimated)" } else { "" }))
                .unwrap_or_default();
            writeln!(out, "{}: {:.2} frames/s{energy}", r.label, r.throughput_fps).unwrap();
            reports.push(r);
        }
        if let Some(path) = a.profile_out {
            let mut text = String::new();
            for r in &reports {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
    }
    Ok(out)
}

/// The curve of `path` named `id`, or its only curve.
fn pick_curve(path: &Path, id: Option<&str>) -> Result<RDCurve> {
    require("results", path)?;
    let all = curves(&read_results(path)?);
    let names = || all.iter().map(|c| c.model_id.as_str()).collect::<Vec<_>>();
    match id {
        Some(id) => {
            all.iter().find(|c| c.model_id == id).cloned().ok_or_else(|| {
                Error::config("model_id", format!("`{id}` not in {} (has {:?})", path.display(), names()))
            })
        }
        None => match all.as_slice() {
            [one] => Ok(one.clone()),
            [] => Err(Error::Precondition(format!("{} holds no RD records", path.display()))),
            _ => Err(Error::config(
                "model_id",
                format!("{} holds several curves {:?}; pick one", path.display(), names()),
            )),
        },
    }
}

pub struct BdArgs<'a> {
    pub reference: &'a Path,
    pub test: &'a Path,
    pub reference_id: Option<&'a str>,
    pub test_id: Option<&'a str>,
    pub fit: BdFit,
    pub out: Option<&'a Path>,
}

#[derive(serde::Serialize)]
struct BdReport<'a> {
    reference: &'a str,
    test: &'a str,
    bd_rate_percent: &'a BdOutcome,
    bd_psnr_db: &'a BdOutcome,
}

pub fn bd(a: BdArgs<'_>) -> Result<String> {
    let r = pick_curve(a.reference, a.reference_id)?;
    let t = pick_curve(a.test, a.test_id)?;
    let options = BdOptions { fit: a.fit };
    let rate = bd_rate_with(&r, &t, options)?;
    let psnr = bd_psnr_with(&r, &t, options)?;
    let mut out = String::new();
    writeln!(out, "reference: {} ({} points)", r.model_id, r.points.len()).unwrap();
    writeln!(out, "test:      {} ({} points)", t.model_id, t.points.len()).unwrap();
    writeln!(
        out,
        "BD-rate: {:+.4} % over PSNR [{:.3}, {:.3}] dB ({})",
        rate.value, rate.overlap.0, rate.overlap.1, rate.fit_used
    )
    .unwrap();
    writeln!(
        out,
        "BD-PSNR: {:+.4} dB over log10(bpp) [{:.4}, {:.4}] ({})",
        psnr.value, psnr.overlap.0, psnr.overlap.1, psnr.fit_used
    )
    .unwrap();
    let mut warnings: Vec<&String> = rate.warnings.iter().collect();
    for w in &psnr.warnings {
        if !warnings.contains(&w) {
            warnings.push(w);
        }
    }
    for w in warnings {
        writeln!(out, "warning: {w}").unwrap();
    }
    if let Some(path) = a.out {
        let report = BdReport { reference: &r.model_id, test: &t.model_id, bd_rate_percent: &rate, bd_psnr_db: &psnr };
        let text = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(out)
}

pub fn plot(files: &[PathBuf], out_dir: &Path, title: &str) -> Result<String> {
    if files.is_empty() {
        return Err(Error::config("results", "give at least one results file"));
    }
    let mut records = Vec::new();
    for f in files {
        require("results", f)?;
        records.extend(read_results(f)?);
    }
    let written = crate::plot::plot_results(&records, out_dir, title)?;
    Ok(written.iter().map(|p| format!("wrote {}\n", p.display())).collect())
}
