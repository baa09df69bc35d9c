//! Traditional codec baselines, evaluated with the same RD metrics and timing
//! protocol as the learned models.

#[cfg(feature = "jpeg2000")]
pub mod jpeg2000;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;

use candle_core::Device;
use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use kdlic::data::{image_to_tensor, EvalImage};
use kdlic::metrics::{aggregate, msssim, psnr, ImageMetrics, RDCurve, RDPoint, MSSSIM_MIN_SIDE};
use kdlic::profiler::{
    device_description, measure_energy, measure_throughput, FrameProcessor, MeterCapability, PowerMeter,
};
use kdlic::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecName {
    Jpeg,
    Webp,
    Jpeg2000,
}

impl CodecName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jpeg" | "jpg" => Ok(Self::Jpeg),
            "webp" => Ok(Self::Webp),
            "jpeg2000" | "jp2" | "j2k" => Ok(Self::Jpeg2000),
            other => Err(Error::config("codec", format!("unknown codec `{other}` (jpeg, webp, jpeg2000)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Jpeg => "jpeg",
            Self::Webp => "webp",
            Self::Jpeg2000 => "jpeg2000",
        }
    }

    /// Inclusive range of `quality_param`.
    pub fn quality_range(self) -> (u32, u32) {
        match self {
            Self::Jpeg => (1, 100),
            Self::Webp => (0, 100),
            // compression ratio; 0 keeps the library's lossless default
            Self::Jpeg2000 => (0, 1000),
        }
    }

    fn flags(self) -> &'static [&'static str] {
        match self {
            Self::Jpeg => &[],
            Self::Webp => &["lossless", "method"],
            Self::Jpeg2000 => &["irreversible"],
        }
    }

    pub fn available(self) -> bool {
        match self {
            Self::Jpeg => true,
            Self::Webp => cfg!(feature = "webp"),
            Self::Jpeg2000 => cfg!(feature = "jpeg2000"),
        }
    }
}

impl fmt::Display for CodecName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One codec configuration.
///
/// `quality_param` is JPEG quality (1-100), WebP quality (0-100) or a
/// JPEG-2000 compression ratio (0 = library default). Mode flags:
/// WebP `lossless` (bool) and `method` (0-6); JPEG-2000 `irreversible`
/// (bool, defaults to true when a ratio is set).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecSpec {
    pub name: CodecName,
    pub quality_param: u32,
    #[serde(default)]
    pub mode_flags: BTreeMap<String, String>,
}

impl CodecSpec {
    pub fn new(name: CodecName, quality_param: u32) -> Self {
        Self { name, quality_param, mode_flags: BTreeMap::new() }
    }

    pub fn jpeg(quality: u32) -> Self {
        Self::new(CodecName::Jpeg, quality)
    }

    pub fn webp(quality: u32) -> Self {
        Self::new(CodecName::Webp, quality)
    }

    pub fn webp_lossless() -> Self {
        Self::webp(100).with_flag("lossless", "true")
    }

    pub fn jpeg2000(ratio: u32) -> Self {
        Self::new(CodecName::Jpeg2000, ratio)
    }

    pub fn with_flag(mut self, key: &str, value: &str) -> Self {
        self.mode_flags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.name.quality_range();
        if !(lo..=hi).contains(&self.quality_param) {
            return Err(Error::config(
                "quality_param",
                format!("{} expects {lo}..={hi}, got {}", self.name, self.quality_param),
            ));
        }
        for key in self.mode_flags.keys() {
            if !self.name.flags().contains(&key.as_str()) {
                return Err(Error::config(
                    "mode_flags",
                    format!("`{key}` is not an option of {} (known: {:?})", self.name, self.name.flags()),
                ));
            }
        }
        self.bool_flag("lossless")?;
        self.bool_flag("irreversible")?;
        if let Some(m) = self.mode_flags.get("method") {
            match m.parse::<u8>() {
                Ok(0..=6) => {}
                _ => return Err(Error::config("mode_flags", format!("webp method must be 0..=6, got `{m}`"))),
            }
        }
        Ok(())
    }

    fn bool_flag(&self, key: &str) -> Result<Option<bool>> {
        match self.mode_flags.get(key).map(String::as_str) {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(v) => Err(Error::config("mode_flags", format!("`{key}` must be a boolean, got `{v}`"))),
        }
    }

    pub fn is_lossless(&self) -> bool {
        match self.name {
            CodecName::Jpeg => false,
            CodecName::Webp => self.bool_flag("lossless").ok().flatten().unwrap_or(false),
            CodecName::Jpeg2000 => {
                self.quality_param == 0 && !self.bool_flag("irreversible").ok().flatten().unwrap_or(false)
            }
        }
    }

    /// Point label, e.g. `jpeg-q50`, `webp-lossless`, `jpeg2000-r20`.
    pub fn label(&self) -> String {
        let mut s = match (self.name, self.is_lossless()) {
            (CodecName::Webp, true) => "webp-lossless".to_string(),
            (CodecName::Jpeg2000, _) if self.quality_param == 0 => "jpeg2000-default".to_string(),
            (CodecName::Jpeg2000, _) => format!("jpeg2000-r{}", self.quality_param),
            (name, _) => format!("{name}-q{}", self.quality_param),
        };
        for (k, v) in &self.mode_flags {
            if k != "lossless" {
                s.push_str(&format!("-{k}{v}"));
            }
        }
        s
    }
}

fn capability(name: CodecName) -> Error {
    Error::Capability(format!(
        "codec `{name}` is not available in this build (enable the `{name}` feature of kdlic-codecs)"
    ))
}

/// Compressed bytes of `rgb` under `spec`.
pub fn encode(rgb: &RgbImage, spec: &CodecSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::Precondition("cannot encode an empty image".into()));
    }
    match spec.name {
        CodecName::Jpeg => {
            let mut out = Vec::new();
            JpegEncoder::new_with_quality(&mut out, spec.quality_param as u8)
                .encode_image(rgb)
                .map_err(|e| Error::Capability(format!("jpeg: encoding failed: {e}")))?;
            Ok(out)
        }
        CodecName::Webp => encode_webp(rgb, spec),
        CodecName::Jpeg2000 => encode_jpeg2000(rgb, spec),
    }
}

#[cfg(feature = "webp")]
fn encode_webp(rgb: &RgbImage, spec: &CodecSpec) -> Result<Vec<u8>> {
    let mut config = webp::WebPConfig::new().map_err(|_| Error::Capability("webp: bad default config".into()))?;
    config.lossless = spec.is_lossless() as i32;
    config.quality = spec.quality_param as f32;
    if let Some(m) = spec.mode_flags.get("method") {
        config.method = m.parse().unwrap_or(config.method);
    }
    if config.lossless == 1 {
        // keep exact RGB values under the (absent) alpha channel
        config.exact = 1;
    }
    let mem = webp::Encoder::from_rgb(rgb.as_raw(), rgb.width(), rgb.height())
        .encode_advanced(&config)
        .map_err(|e| Error::Capability(format!("webp: encoding failed: {e:?}")))?;
    Ok(mem.to_vec())
}

#[cfg(not(feature = "webp"))]
fn encode_webp(_: &RgbImage, _: &CodecSpec) -> Result<Vec<u8>> {
    Err(capability(CodecName::Webp))
}

#[cfg(feature = "jpeg2000")]
fn encode_jpeg2000(rgb: &RgbImage, spec: &CodecSpec) -> Result<Vec<u8>> {
    let rate = spec.quality_param as f32;
    let irreversible = spec.bool_flag("irreversible")?.unwrap_or(spec.quality_param > 0);
    jpeg2000::encode(rgb, jpeg2000::Jp2Options { rate, irreversible })
}

#[cfg(not(feature = "jpeg2000"))]
fn encode_jpeg2000(_: &RgbImage, _: &CodecSpec) -> Result<Vec<u8>> {
    Err(capability(CodecName::Jpeg2000))
}

/// Decodes bytes produced by [`encode`] with the same codec.
pub fn decode(bytes: &[u8], name: CodecName) -> Result<RgbImage> {
    match name {
        CodecName::Jpeg => image::load(Cursor::new(bytes), ImageFormat::Jpeg)
            .map(|d| d.to_rgb8())
            .map_err(|e| Error::Capability(format!("jpeg: decoding failed: {e}"))),
        CodecName::Webp => decode_webp(bytes),
        CodecName::Jpeg2000 => decode_jpeg2000(bytes),
    }
}

#[cfg(feature = "webp")]
fn decode_webp(bytes: &[u8]) -> Result<RgbImage> {
    let img = webp::Decoder::new(bytes).decode().ok_or_else(|| Error::Capability("webp: decoding failed".into()))?;
    let (w, h) = (img.width(), img.height());
    let raw: Vec<u8> =
        if img.is_alpha() { img.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect() } else { img.to_vec() };
    RgbImage::from_raw(w, h, raw).ok_or_else(|| Error::Shape("webp: decoded buffer does not match its size".into()))
}

#[cfg(not(feature = "webp"))]
fn decode_webp(_: &[u8]) -> Result<RgbImage> {
    Err(capability(CodecName::Webp))
}

#[cfg(feature = "jpeg2000")]
fn decode_jpeg2000(bytes: &[u8]) -> Result<RgbImage> {
    jpeg2000::decode(bytes)
}

#[cfg(not(feature = "jpeg2000"))]
fn decode_jpeg2000(_: &[u8]) -> Result<RgbImage> {
    Err(capability(CodecName::Jpeg2000))
}

/// Encodes then decodes `rgb`, returning the reconstruction and the
/// compressed size in bytes.
pub fn codec_roundtrip(rgb: &RgbImage, spec: &CodecSpec) -> Result<(RgbImage, usize)> {
    if !spec.name.available() {
        return Err(capability(spec.name));
    }
    let bytes = encode(rgb, spec)?;
    let decoded = decode(&bytes, spec.name)?;
    if decoded.dimensions() != rgb.dimensions() {
        return Err(Error::Shape(format!(
            "{}: decoded {:?} from a {:?} image",
            spec.name,
            decoded.dimensions(),
            rgb.dimensions()
        )));
    }
    Ok((decoded, bytes.len()))
}

/// `8 * bytes / pixels`.
pub fn bits_per_pixel(bytes: usize, width: u32, height: u32) -> f64 {
    8.0 * bytes as f64 / (width as f64 * height as f64)
}

/// Roundtrip metrics of one image; the rate is the real compressed size.
pub fn evaluate_codec_image(image: &EvalImage, spec: &CodecSpec) -> Result<ImageMetrics> {
    let run = || -> Result<ImageMetrics> {
        let (decoded, bytes) = codec_roundtrip(&image.rgb, spec)?;
        let x = &image.pixels;
        let x_hat = image_to_tensor(&decoded, &Device::Cpu)?.unsqueeze(0)?.to_dtype(x.dtype())?;
        let side = decoded.width().min(decoded.height()) as usize;
        Ok(ImageMetrics {
            name: image.name.clone(),
            bpp: bits_per_pixel(bytes, image.rgb.width(), image.rgb.height()),
            psnr: psnr(x, &x_hat)?,
            msssim: if side >= MSSSIM_MIN_SIDE { Some(msssim(x, &x_hat)?) } else { None },
        })
    };
    run().map_err(|e| Error::Evaluation { image: image.name.clone(), source: Box::new(e) })
}

/// One RD point averaged over `eval_set`.
pub fn evaluate_codec(eval_set: &[EvalImage], spec: &CodecSpec) -> Result<RDPoint> {
    if eval_set.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let per_image = eval_set.iter().map(|im| evaluate_codec_image(im, spec)).collect::<Result<Vec<_>>>()?;
    aggregate(&per_image, spec.label())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecSweep {
    pub curve: RDCurve,
    pub warnings: Vec<String>,
}

/// One RD point per distinct spec, labelled with the codec name. Repeated
/// specs are evaluated once and reported as a warning.
pub fn codec_rd_curve(eval_set: &[EvalImage], specs: &[CodecSpec]) -> Result<CodecSweep> {
    let Some(first) = specs.first() else {
        return Err(Error::Precondition("codec sweep needs at least one spec".into()));
    };
    if let Some(other) = specs.iter().find(|s| s.name != first.name) {
        return Err(Error::config("specs", format!("one curve per codec; got {} and {}", first.name, other.name)));
    }
    let mut warnings = Vec::new();
    let mut distinct: Vec<&CodecSpec> = Vec::new();
    for s in specs {
        s.validate()?;
        if distinct.contains(&s) {
            let msg = format!("duplicate spec {} evaluated once", s.label());
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            distinct.push(s);
        }
    }
    let points = distinct.into_iter().map(|s| evaluate_codec(eval_set, s)).collect::<Result<Vec<_>>>()?;
    Ok(CodecSweep { curve: RDCurve::new(first.name.as_str(), points), warnings })
}

impl FrameProcessor<RgbImage> for CodecSpec {
    fn process(&self, frame: &RgbImage) -> Result<()> {
        codec_roundtrip(frame, self).map(|_| ())
    }
}

/// Speed and energy of a codec, the resource columns that apply to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub label: String,
    pub spec: CodecSpec,
    pub point: RDPoint,
    /// Encode plus decode, frames per second.
    pub throughput_fps: f64,
    pub energy_mj_per_frame: Option<f64>,
    pub energy_estimated: bool,
    pub passes: usize,
    pub device_desc: String,
    pub meter_desc: String,
}

/// RD point plus throughput and energy over preloaded in-memory images. A
/// null meter leaves the energy column empty.
pub fn profile_codec(
    eval_set: &[EvalImage],
    spec: &CodecSpec,
    meter: &mut dyn PowerMeter,
    passes: usize,
) -> Result<CodecReport> {
    let point = evaluate_codec(eval_set, spec)?;
    let frames: Vec<RgbImage> = eval_set.iter().map(|im| im.rgb.clone()).collect();
    let (fps, energy, estimated) = if meter.capability() == MeterCapability::Null {
        (measure_throughput(spec, &frames, passes)?.fps, None, false)
    } else {
        let e = measure_energy(spec, &frames, meter, passes)?;
        (e.fps, Some(e.mj_per_frame), e.estimated)
    };
    Ok(CodecReport {
        label: spec.label(),
        spec: spec.clone(),
        point,
        throughput_fps: fps,
        energy_mj_per_frame: energy,
        energy_estimated: estimated,
        passes,
        device_desc: device_description(),
        meter_desc: meter.describe(),
    })
}
