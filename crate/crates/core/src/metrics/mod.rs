//! Image quality, rate estimation, RD aggregation and Bjøntegaard deltas.

pub mod bd;
pub mod results;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::EvalImage;
use crate::error::{Error, Result};
use crate::losses::{rate_bpp, scalar};
use crate::model::{CompressionModel, CompressionOutputs};

pub use bd::{bd_psnr, bd_rate, BdFit, BdOptions, BdOutcome};

/// Returned for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const MSSSIM_WINDOW: usize = 11;
const MSSSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Smallest side that survives four halvings with an 11-tap valid window.
pub const MSSSIM_MIN_SIDE: usize = (MSSSIM_WINDOW - 1) * 16 + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
    /// Absent when an image is below [`MSSSIM_MIN_SIDE`].
    pub msssim: Option<f64>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub model_id: String,
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(model_id: impl Into<String>, points: Vec<RDPoint>) -> Self {
        Self { model_id: model_id.into(), points }
    }
}

fn check_same_shape(x: &Tensor, x_hat: &Tensor) -> Result<()> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!("image {:?} vs reconstruction {:?}", x.dims(), x_hat.dims())));
    }
    Ok(())
}

/// Mean squared error in `f64`.
pub fn mse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    check_same_shape(x, x_hat)?;
    let a = x.to_dtype(DType::F64)?;
    let b = x_hat.to_dtype(DType::F64)?;
    scalar(&(a - b)?.sqr()?.mean_all()?)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR in dB for images on the `[0, 1]` scale.
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, x_hat)?))
}

fn gaussian_window() -> [f64; MSSSIM_WINDOW] {
    let mut g = [0.0; MSSSIM_WINDOW];
    let half = (MSSSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * MSSSIM_SIGMA * MSSSIM_SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= sum);
    g
}

/// Single-channel plane, row-major.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    /// Separable valid-mode filtering.
    fn blur(&self, win: &[f64]) -> Plane {
        let k = win.len();
        let ow = self.w + 1 - k;
        let mut rows = vec![0.0; self.h * ow];
        for r in 0..self.h {
            let src = &self.v[r * self.w..(r + 1) * self.w];
            for c in 0..ow {
                rows[r * ow + c] = win.iter().zip(&src[c..c + k]).map(|(a, b)| a * b).sum();
            }
        }
        let oh = self.h + 1 - k;
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for (i, wv) in win.iter().enumerate() {
                let src = &rows[(r + i) * ow..(r + i + 1) * ow];
                let dst = &mut out[r * ow..(r + 1) * ow];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&other.v).map(|(a, b)| f(*a, *b)).collect() }
    }

    /// 2x2 average pooling; odd sides get one zero-padded row/column on
    /// each side, counted in the average.
    fn downsample(&self) -> Plane {
        let (ph, pw) = (self.h % 2, self.w % 2);
        let oh = (self.h + 2 * ph - 2) / 2 + 1;
        let ow = (self.w + 2 * pw - 2) / 2 + 1;
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= self.h as isize || c >= self.w as isize {
                0.0
            } else {
                self.v[r as usize * self.w + c as usize]
            }
        };
        let mut v = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let r0 = (2 * r) as isize - ph as isize;
                let c0 = (2 * c) as isize - pw as isize;
                v.push((at(r0, c0) + at(r0, c0 + 1) + at(r0 + 1, c0) + at(r0 + 1, c0 + 1)) / 4.0);
            }
        }
        Plane { h: oh, w: ow, v }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean SSIM and mean contrast-structure term of one channel.
fn ssim_cs(x: &Plane, y: &Plane, win: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu1 = x.blur(win);
    let mu2 = y.blur(win);
    let xx = x.zip(x, |a, b| a * b).blur(win);
    let yy = y.zip(y, |a, b| a * b).blur(win);
    let xy = x.zip(y, |a, b| a * b).blur(win);
    let n = mu1.v.len();
    let mut cs = Vec::with_capacity(n);
    let mut ssim = Vec::with_capacity(n);
    for i in 0..n {
        let (m1, m2) = (mu1.v[i], mu2.v[i]);
        let s1 = xx.v[i] - m1 * m1;
        let s2 = yy.v[i] - m2 * m2;
        let s12 = xy.v[i] - m1 * m2;
        let c = (2.0 * s12 + c2) / (s1 + s2 + c2);
        cs.push(c);
        ssim.push((2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1) * c);
    }
    (mean(&ssim), mean(&cs))
}

fn planes(t: &Tensor) -> Result<Vec<Plane>> {
    let t = match t.rank() {
        3 => t.unsqueeze(0)?,
        4 => t.clone(),
        r => return Err(Error::Shape(format!("expected a 3- or 4-d image tensor, got rank {r}"))),
    };
    let (b, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b * c).map(|i| Plane { h, w, v: v[i * h * w..(i + 1) * h * w].to_vec() }).collect())
}

/// Five-scale MS-SSIM on the `[0, 1]` scale, averaged over batch and channels.
pub fn msssim(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    check_same_shape(x, x_hat)?;
    let dims = x.dims();
    let side = dims[dims.len() - 2].min(dims[dims.len() - 1]);
    if side < MSSSIM_MIN_SIDE {
        return Err(Error::Precondition(format!(
            "MS-SSIM needs both image sides >= {MSSSIM_MIN_SIDE}, smallest side is {side}"
        )));
    }
    let win = gaussian_window();
    let xs = planes(x)?;
    let ys = planes(x_hat)?;
    let mut total = 0.0;
    for (mut a, mut b) in xs.into_iter().zip(ys) {
        let mut value = 1.0;
        for (level, weight) in MSSSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&a, &b, &win);
            let term = if level + 1 < MSSSIM_WEIGHTS.len() {
                a = a.downsample();
                b = b.downsample();
                cs
            } else {
                ssim
            };
            value *= term.max(0.0).powf(*weight);
        }
        total += value;
    }
    Ok(total / planes_count(dims) as f64)
}

fn planes_count(dims: &[usize]) -> usize {
    dims[..dims.len() - 2].iter().product()
}

/// `(Σ -log2 y_lik + Σ -log2 z_lik) / num_pixels`, accumulated in `f64`.
pub fn estimate_bpp(outputs: &CompressionOutputs, num_pixels: usize) -> Result<f64> {
    let y = outputs.y_likelihoods.to_dtype(DType::F64)?;
    let z = outputs.z_likelihoods.to_dtype(DType::F64)?;
    scalar(&rate_bpp(&y, &z, num_pixels)?)
}

/// Metrics of one evaluation image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: Option<f64>,
}

pub fn evaluate_image(model: &CompressionModel, image: &EvalImage) -> Result<ImageMetrics> {
    let run = || -> Result<ImageMetrics> {
        let out = model.forward_eval(&image.pixels)?;
        let x = &image.pixels;
        let x_hat = out.x_hat.to_dtype(x.dtype())?;
        let side = image.rgb.width().min(image.rgb.height()) as usize;
        let msssim = if side >= MSSSIM_MIN_SIDE { Some(msssim(x, &x_hat)?) } else { None };
        Ok(ImageMetrics {
            name: image.name.clone(),
            bpp: estimate_bpp(&out, image.num_pixels())?,
            psnr: psnr(x, &x_hat)?,
            msssim,
        })
    };
    run().map_err(|e| Error::Evaluation { image: image.name.clone(), source: Box::new(e) })
}

/// Arithmetic means over images; MS-SSIM is reported only if every image has it.
pub fn aggregate(per_image: &[ImageMetrics], label: impl Into<String>) -> Result<RDPoint> {
    if per_image.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let n = per_image.len() as f64;
    let msssim = per_image.iter().map(|m| m.msssim).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
    Ok(RDPoint {
        bpp: per_image.iter().map(|m| m.bpp).sum::<f64>() / n,
        psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
        msssim,
        label: label.into(),
    })
}

pub fn evaluate_model(model: &CompressionModel, eval_set: &[EvalImage], label: impl Into<String>) -> Result<RDPoint> {
    if eval_set.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let per_image = eval_set.iter().map(|im| evaluate_image(model, im)).collect::<Result<Vec<_>>>()?;
    aggregate(&per_image, label)
}
