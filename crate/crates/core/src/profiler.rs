//! FLOP counting, throughput and energy per frame.

use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{LayerSpec, TransformInput, TransformSpec};
use crate::model::{count_parameters, memory_bytes, CompressionModel, STRIDE_MULTIPLE};

/// How multiply-accumulates are converted to FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopConvention {
    /// One FLOP per MAC, the convention of common profiling tools.
    #[default]
    MacAsOne,
    /// A multiply and an add per MAC.
    TwoPerMac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopCount {
    pub macs: u64,
    /// Non-MAC elementwise operations (GDN square root and division).
    pub other_ops: u64,
}

impl FlopCount {
    pub fn flops(&self, convention: FlopConvention) -> u64 {
        match convention {
            FlopConvention::MacAsOne => self.macs + self.other_ops,
            FlopConvention::TwoPerMac => 2 * self.macs + self.other_ops,
        }
    }

    pub fn gflops(&self, convention: FlopConvention) -> f64 {
        self.flops(convention) as f64 / 1e9
    }
}

impl std::ops::Add for FlopCount {
    type Output = FlopCount;
    fn add(self, o: FlopCount) -> FlopCount {
        FlopCount { macs: self.macs + o.macs, other_ops: self.other_ops + o.other_ops }
    }
}

/// Feature-map shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

fn layer_flops(layer: &LayerSpec, s: Shape) -> std::result::Result<(FlopCount, Shape), String> {
    match *layer {
        LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
            let pad = kernel / 2;
            let h = (s.h + 2 * pad - kernel) / stride + 1;
            let w = (s.w + 2 * pad - kernel) / stride + 1;
            let macs = (h * w * kernel * kernel * in_channels * out_channels) as u64;
            Ok((FlopCount { macs, other_ops: 0 }, Shape { c: out_channels, h, w }))
        }
        LayerSpec::ConvTranspose { in_channels, out_channels, kernel, stride } => {
            // every input pixel scatters a k x k x out block
            let macs = (s.h * s.w * kernel * kernel * in_channels * out_channels) as u64;
            let out = Shape { c: out_channels, h: s.h * stride, w: s.w * stride };
            Ok((FlopCount { macs, other_ops: 0 }, out))
        }
        LayerSpec::Gdn { channels, .. } => {
            let elems = (channels * s.h * s.w) as u64;
            Ok((FlopCount { macs: channels as u64 * elems, other_ops: 3 * elems }, s))
        }
        LayerSpec::Relu => Ok((FlopCount::default(), s)),
        LayerSpec::Other(ref name) => Err(name.clone()),
    }
}

/// Analytic count over a list of transforms fed by an image of `height x width`.
pub fn count_flops_specs(transforms: &[TransformSpec], height: usize, width: usize) -> Result<FlopCount> {
    let unsupported: Vec<String> = transforms
        .iter()
        .flat_map(|t| t.layers.iter())
        .filter_map(|l| match l {
            LayerSpec::Other(name) => Some(name.clone()),
            _ => None,
        })
        .collect();
    if !unsupported.is_empty() {
        return Err(Error::UnsupportedLayers(unsupported));
    }
    let mut outputs: Vec<Shape> = Vec::with_capacity(transforms.len());
    let mut total = FlopCount::default();
    for t in transforms {
        let mut s = match t.input {
            TransformInput::Image => Shape { c: 3, h: height, w: width },
            TransformInput::Transform(i) => *outputs
                .get(i)
                .ok_or_else(|| Error::Precondition(format!("transform {} reads from unknown index {i}", t.name)))?,
        };
        for layer in &t.layers {
            let (f, next) = layer_flops(layer, s).map_err(|n| Error::UnsupportedLayers(vec![n]))?;
            total = total + f;
            s = next;
        }
        outputs.push(s);
    }
    Ok(total)
}

/// Encoder, hyper-encoder, hyper-decoder and decoder FLOPs for one frame,
/// at the padded size the model actually processes.
pub fn count_flops(model: &CompressionModel, height: usize, width: usize) -> Result<FlopCount> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("input shape {height}x{width}")));
    }
    let ph = height.div_ceil(STRIDE_MULTIPLE) * STRIDE_MULTIPLE;
    let pw = width.div_ceil(STRIDE_MULTIPLE) * STRIDE_MULTIPLE;
    count_flops_specs(&model.transform_specs(), ph, pw)
}

/// Something that can process one frame of type `F`.
pub trait FrameProcessor<F = Tensor> {
    fn process(&self, frame: &F) -> Result<()>;
}

impl FrameProcessor for CompressionModel {
    fn process(&self, frame: &Tensor) -> Result<()> {
        self.forward_eval(frame).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub fps: f64,
    pub frames: usize,
    pub seconds: f64,
}

fn timed_passes<F, P: FrameProcessor<F> + ?Sized>(model: &P, frames: &[F], passes: usize) -> Result<(usize, Duration)> {
    if frames.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    if passes == 0 {
        return Err(Error::config("passes", "must be at least 1"));
    }
    for f in frames {
        model.process(f)?;
    }
    let start = Instant::now();
    for _ in 0..passes {
        for f in frames {
            model.process(f)?;
        }
    }
    Ok((passes * frames.len(), start.elapsed()))
}

/// Frames per second over `passes` sweeps of preloaded `frames`, after one
/// untimed warm-up sweep.
pub fn measure_throughput<F, P: FrameProcessor<F> + ?Sized>(
    model: &P,
    frames: &[F],
    passes: usize,
) -> Result<Throughput> {
    let (n, elapsed) = timed_passes(model, frames, passes)?;
    let seconds = elapsed.as_secs_f64();
    Ok(Throughput { fps: n as f64 / seconds, frames: n, seconds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeterCapability {
    HardwareTelemetry,
    TimeProxy,
    Null,
}

/// Cumulative energy source.
pub trait PowerMeter {
    fn capability(&self) -> MeterCapability;
    /// Energy consumed since an arbitrary origin, in joules. Non-decreasing.
    fn read_joules(&mut self) -> Result<f64>;
    fn describe(&self) -> String;
}

/// Declared constant device power times wall-clock time.
#[derive(Debug, Clone)]
pub struct ProxyMeter {
    watts: f64,
    origin: Instant,
}

impl ProxyMeter {
    pub fn new(watts: f64) -> Result<Self> {
        if !(watts > 0.0 && watts.is_finite()) {
            return Err(Error::config("meter", format!("proxy power must be positive, got {watts}")));
        }
        Ok(Self { watts, origin: Instant::now() })
    }
}

impl PowerMeter for ProxyMeter {
    fn capability(&self) -> MeterCapability {
        MeterCapability::TimeProxy
    }

    fn read_joules(&mut self) -> Result<f64> {
        Ok(self.watts * self.origin.elapsed().as_secs_f64())
    }

    fn describe(&self) -> String {
        format!("time proxy at {} W", self.watts)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullMeter;

impl PowerMeter for NullMeter {
    fn capability(&self) -> MeterCapability {
        MeterCapability::Null
    }

    fn read_joules(&mut self) -> Result<f64> {
        Err(null_meter_error())
    }

    fn describe(&self) -> String {
        "none".into()
    }
}

fn null_meter_error() -> Error {
    Error::Capability(
        "no power meter available; use `--meter proxy:<watts>` for an estimate, \
         or `--meter none` to omit the energy columns"
            .into(),
    )
}

/// Package energy counters exposed by the Linux powercap interface.
#[derive(Debug)]
pub struct RaplMeter {
    zones: Vec<RaplZone>,
}

#[derive(Debug)]
struct RaplZone {
    counter: PathBuf,
    max_uj: u64,
    last_uj: u64,
    accumulated_uj: u128,
}

pub const POWERCAP_ROOT: &str = "/sys/class/powercap";

fn read_u64(path: &PathBuf) -> Result<u64> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    s.trim().parse().map_err(|_| Error::Capability(format!("{} is not an integer counter", path.display())))
}

impl RaplMeter {
    /// Opens every top-level package zone (`intel-rapl:N`).
    pub fn open() -> Result<Self> {
        Self::open_at(POWERCAP_ROOT)
    }

    pub fn open_at(root: impl AsRef<std::path::Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut zones = Vec::new();
        if let Ok(entries) = fs::read_dir(root) {
            let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            dirs.sort();
            for dir in dirs {
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                // package zones only; sub-zones are already included in them
                if !(name.starts_with("intel-rapl:") && name.matches(':').count() == 1) {
                    continue;
                }
                let counter = dir.join("energy_uj");
                let max_uj = read_u64(&dir.join("max_energy_range_uj")).unwrap_or(u64::MAX);
                if let Ok(last_uj) = read_u64(&counter) {
                    zones.push(RaplZone { counter, max_uj, last_uj, accumulated_uj: 0 });
                }
            }
        }
        if zones.is_empty() {
            return Err(Error::Capability(format!(
                "no readable RAPL energy counters under {}; use `--meter proxy:<watts>` or `--meter none`",
                root.display()
            )));
        }
        Ok(Self { zones })
    }
}

impl PowerMeter for RaplMeter {
    fn capability(&self) -> MeterCapability {
        MeterCapability::HardwareTelemetry
    }

    fn read_joules(&mut self) -> Result<f64> {
        let mut total = 0u128;
        for z in &mut self.zones {
            let now = read_u64(&z.counter)?;
            let delta = if now >= z.last_uj { now - z.last_uj } else { z.max_uj - z.last_uj + now };
            z.accumulated_uj += delta as u128;
            z.last_uj = now;
            total += z.accumulated_uj;
        }
        Ok(total as f64 / 1e6)
    }

    fn describe(&self) -> String {
        format!("RAPL ({} package zone(s))", self.zones.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyMeasurement {
    pub mj_per_frame: f64,
    pub fps: f64,
    pub average_watts: f64,
    pub frames: usize,
    /// Derived from a time proxy rather than telemetry.
    pub estimated: bool,
}

/// `(energy at end - energy at start) / frames`, in millijoules.
pub fn energy_per_frame_mj(joules: f64, frames: usize) -> Result<f64> {
    if frames == 0 {
        return Err(Error::Precondition("no frames processed; energy per frame is undefined".into()));
    }
    Ok(joules * 1e3 / frames as f64)
}

/// Times `passes` sweeps while reading `meter` around the timed region,
/// giving throughput and energy from the same session.
pub fn measure_energy<F, P: FrameProcessor<F> + ?Sized>(
    model: &P,
    frames: &[F],
    meter: &mut dyn PowerMeter,
    passes: usize,
) -> Result<EnergyMeasurement> {
    if meter.capability() == MeterCapability::Null {
        return Err(null_meter_error());
    }
    if frames.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    if passes == 0 {
        return Err(Error::config("passes", "must be at least 1"));
    }
    for f in frames {
        model.process(f)?;
    }
    let e0 = meter.read_joules()?;
    let start = Instant::now();
    for _ in 0..passes {
        for f in frames {
            model.process(f)?;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let e1 = meter.read_joules()?;
    let n = passes * frames.len();
    let joules = (e1 - e0).max(0.0);
    Ok(EnergyMeasurement {
        mj_per_frame: energy_per_frame_mj(joules, n)?,
        fps: n as f64 / seconds,
        average_watts: joules / seconds,
        frames: n,
        estimated: meter.capability() == MeterCapability::TimeProxy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub model_id: String,
    pub params_m: f64,
    /// Parameter storage in MiB.
    pub memory_mb: f64,
    pub gflops_per_frame: f64,
    pub flop_convention: FlopConvention,
    pub input_shape: (usize, usize),
    pub throughput_fps: f64,
    pub energy_mj_per_frame: Option<f64>,
    pub energy_estimated: bool,
    pub passes: usize,
    pub device_desc: String,
    pub meter_desc: String,
}

/// CPU model and thread count from the running host.
pub fn device_description() -> String {
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("cpu: {model} ({threads} threads)")
}

/// Full resource profile of a model over preloaded frames.
pub fn profile_model(
    model_id: &str,
    model: &CompressionModel,
    frames: &[Tensor],
    input_shape: (usize, usize),
    meter: &mut dyn PowerMeter,
    passes: usize,
    convention: FlopConvention,
) -> Result<ProfileReport> {
    let flops = count_flops(model, input_shape.0, input_shape.1)?;
    let (fps, energy, estimated) = if meter.capability() == MeterCapability::Null {
        (measure_throughput(model, frames, passes)?.fps, None, false)
    } else {
        let e = measure_energy(model, frames, meter, passes)?;
        (e.fps, Some(e.mj_per_frame), e.estimated)
    };
    Ok(ProfileReport {
        model_id: model_id.to_string(),
        params_m: count_parameters(model) as f64 / 1e6,
        memory_mb: memory_bytes(model) as f64 / (1024.0 * 1024.0),
        gflops_per_frame: flops.gflops(convention),
        flop_convention: convention,
        input_shape,
        throughput_fps: fps,
        energy_mj_per_frame: energy,
        energy_estimated: estimated,
        passes,
        device_desc: device_description(),
        meter_desc: meter.describe(),
    })
}
