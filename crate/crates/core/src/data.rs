//! Training-patch sampling and evaluation-set loading.
//!
//! A training root must be indexed first: [`index_directory`] decodes every
//! image, records its checksum and size, and [`write_manifest`] stores the
//! result next to the images. Batches are a pure function of `(seed, step)`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor};
use image::{ColorType, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "kdlic-manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

const LOSSLESS_EXTENSIONS: &[&str] = &["png", "bmp", "tif", "tiff", "ppm", "pnm"];
const LOSSY_EXTENSIONS: &[&str] = &["jpg", "jpeg", "webp", "jp2", "j2k", "jpx", "heic", "avif"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the indexed root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub entries: Vec<ManifestEntry>,
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

fn is_image_file(path: &Path) -> bool {
    extension(path).is_some_and(|e| LOSSLESS_EXTENSIONS.contains(&e.as_str()) || LOSSY_EXTENSIONS.contains(&e.as_str()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let path = entry.path();
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn decode(path: &Path, bytes: &[u8]) -> Result<image::DynamicImage> {
    ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ingestion(path, e.to_string()))?
        .decode()
        .map_err(|e| ingestion(path, e.to_string()))
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion { path: path.to_path_buf(), reason: reason.into() }
}

/// Decodes every image under `root` (recursively, sorted by relative path).
pub fn index_directory(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(ingestion(root, "no image files found"));
    }
    let mut entries = Vec::with_capacity(files.len());
    for path in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let img = decode(&path, &bytes)?;
        let rel = path
            .strip_prefix(root)
            .expect("collected under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        entries.push(ManifestEntry { path: rel, sha256: sha256_hex(&bytes), width: img.width(), height: img.height() });
    }
    Ok(Manifest { schema: MANIFEST_SCHEMA, entries })
}

pub fn write_manifest(root: impl AsRef<Path>, manifest: &Manifest) -> Result<PathBuf> {
    let path = root.as_ref().join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let path = root.as_ref().join(MANIFEST_FILE);
    if !path.exists() {
        return Err(ingestion(
            root.as_ref(),
            format!("directory is not indexed (no {MANIFEST_FILE}); run `kdlic index` first"),
        ));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::SchemaVersion { found: manifest.schema, expected: MANIFEST_SCHEMA });
    }
    Ok(manifest)
}

/// `(3, H, W)` tensor with values `v / 255`.
pub fn image_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(planar, (3, h, w), device)?)
}

/// Inverse of [`image_to_tensor`] for a `(3, H, W)` or `(1, 3, H, W)` tensor,
/// clamping to `[0, 1]` and rounding to the nearest 8-bit level.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let t = match t.rank() {
        4 => t.squeeze(0)?,
        _ => t.clone(),
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            raw[3 * i + ch] = (v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

/// One crop of a batch: which manifest entry and the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropChoice {
    pub image: usize,
    pub top: u32,
    pub left: u32,
}

/// Random fixed-size crops from an indexed image folder.
#[derive(Debug)]
pub struct PatchDataset {
    root: PathBuf,
    crop: u32,
    seed: u64,
    entries: Vec<ManifestEntry>,
    cache: Vec<OnceLock<RgbImage>>,
}

impl PatchDataset {
    /// Opens an indexed root. Every manifest entry must exist and be at
    /// least `crop` pixels on both sides.
    pub fn open(root: impl AsRef<Path>, crop: u32, seed: u64) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = read_manifest(&root)?;
        Self::from_manifest(root, manifest, crop, seed)
    }

    pub fn from_manifest(root: PathBuf, manifest: Manifest, crop: u32, seed: u64) -> Result<Self> {
        if crop == 0 {
            return Err(Error::config("crop", "must be positive"));
        }
        if manifest.entries.is_empty() {
            return Err(ingestion(&root, "manifest lists no images"));
        }
        for e in &manifest.entries {
            let path = root.join(&e.path);
            if !path.is_file() {
                return Err(ingestion(&path, "listed in manifest but missing"));
            }
            if e.width < crop || e.height < crop {
                return Err(ingestion(&path, format!("{}x{} is smaller than the {crop}px crop", e.width, e.height)));
            }
        }
        let cache = manifest.entries.iter().map(|_| OnceLock::new()).collect();
        Ok(Self { root, crop, seed, entries: manifest.entries, cache })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn crop(&self) -> u32 {
        self.crop
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Re-hashes every file and compares against the manifest.
    pub fn verify_checksums(&self) -> Result<()> {
        for e in &self.entries {
            let path = self.root.join(&e.path);
            let bytes = fs::read(&path).map_err(|err| Error::io(format!("reading {}", path.display()), err))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(ingestion(&path, "checksum differs from manifest"));
            }
        }
        Ok(())
    }

    /// Image choice and crop offsets for one step: uniform image index,
    /// then uniform top-left corner.
    pub fn batch_plan(&self, step: u64, batch_size: usize) -> Vec<CropChoice> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        (0..batch_size)
            .map(|_| {
                let image = rng.gen_range(0..self.entries.len());
                let e = &self.entries[image];
                let top = rng.gen_range(0..=e.height - self.crop);
                let left = rng.gen_range(0..=e.width - self.crop);
                CropChoice { image, top, left }
            })
            .collect()
    }

    fn image(&self, index: usize) -> Result<&RgbImage> {
        if let Some(img) = self.cache[index].get() {
            return Ok(img);
        }
        let path = self.root.join(&self.entries[index].path);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let img = decode(&path, &bytes)?.to_rgb8();
        let e = &self.entries[index];
        if img.width() != e.width || img.height() != e.height {
            return Err(ingestion(&path, "dimensions differ from manifest"));
        }
        Ok(self.cache[index].get_or_init(|| img))
    }

    /// `(batch_size, 3, crop, crop)` batch in `[0, 1]`.
    pub fn sample_batch(&self, step: u64, batch_size: usize, device: &Device) -> Result<Tensor> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let crop = self.crop;
        let patches = self
            .batch_plan(step, batch_size)
            .into_iter()
            .map(|c| {
                let img = self.image(c.image)?;
                let patch = image::imageops::crop_imm(img, c.left, c.top, crop, crop).to_image();
                image_to_tensor(&patch, device)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&patches, 0)?)
    }
}

/// A validated evaluation image.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub name: String,
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub pixels: Tensor,
    pub rgb: RgbImage,
}

impl EvalImage {
    pub fn from_rgb(name: impl Into<String>, rgb: RgbImage, device: &Device) -> Result<Self> {
        let pixels = image_to_tensor(&rgb, device)?.unsqueeze(0)?;
        Ok(Self { name: name.into(), pixels, rgb })
    }

    pub fn num_pixels(&self) -> usize {
        (self.rgb.width() * self.rgb.height()) as usize
    }
}

/// Loads the lossless 8-bit RGB images directly under `root` in filename
/// order. Lossy files are rejected since they cannot serve as ground truth.
pub fn load_eval_set(root: impl AsRef<Path>, device: &Device) -> Result<Vec<EvalImage>> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", root.display()), e))?.path();
        if !path.is_file() {
            continue;
        }
        let Some(ext) = extension(&path) else { continue };
        if LOSSY_EXTENSIONS.contains(&ext.as_str()) {
            return Err(ingestion(
                &path,
                "lossy format in evaluation root; ground truth must be lossless (PNG, BMP, TIFF, PPM)",
            ));
        }
        if LOSSLESS_EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(ingestion(root, "evaluation directory contains no images"));
    }
    files
        .into_iter()
        .map(|path| {
            let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let img = decode(&path, &bytes)?;
            if img.color() != ColorType::Rgb8 {
                return Err(ingestion(&path, format!("expected 8-bit RGB, found {:?}", img.color())));
            }
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            EvalImage::from_rgb(name, img.into_rgb8(), device)
        })
        .collect()
}
