//! Entropy models: the learned factorized prior over the hyper-latent and the
//! zero-mean Gaussian conditional over the latent.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::ForwardMode;
use crate::error::{Error, Result};

/// Smallest Gaussian scale the conditional model will use.
pub const SCALE_FLOOR: f64 = 0.11;
/// Probability masses are clamped to at least 2^-16 before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;

const TAIL_MASS: f64 = 1e-9;
const INIT_SCALE: f64 = 10.0;

fn map_storage(
    storage: &CpuStorage,
    layout: &Layout,
    f: impl Fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    fn apply<T: Copy>(data: &[T], layout: &Layout, f: impl Fn(T) -> T) -> candle_core::Result<Vec<T>> {
        match layout.contiguous_offsets() {
            Some((start, end)) => Ok(data[start..end].iter().map(|&v| f(v)).collect()),
            None => candle_core::bail!("non-contiguous layout"),
        }
    }
    let out = match storage {
        CpuStorage::F32(data) => CpuStorage::F32(apply(data, layout, |v| f(v as f64) as f32)?),
        CpuStorage::F64(data) => CpuStorage::F64(apply(data, layout, &f)?),
        _ => candle_core::bail!("only f32 and f64 are supported"),
    };
    Ok((out, layout.shape().clone()))
}

struct NormalCdf;

impl CustomOp1 for NormalCdf {
    fn name(&self) -> &'static str {
        "normal-cdf"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(storage, layout, |t| 0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let density = ((arg.sqr()? * -0.5)?.exp()? * inv_sqrt_2pi)?;
        Ok(Some(grad_res.mul(&density)?))
    }
}

/// Standard normal CDF, evaluated through `erfc` so lower tails keep relative precision.
pub fn standard_normal_cdf(t: &Tensor) -> Result<Tensor> {
    Ok(t.contiguous()?.apply_op1(NormalCdf)?)
}

struct LowerBound(f64);

impl CustomOp1 for LowerBound {
    fn name(&self) -> &'static str {
        "lower-bound"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let bound = self.0;
        map_storage(storage, layout, move |v| v.max(bound))
    }

    /// The gradient passes where the input is above the bound, or where it
    /// would push the input upwards.
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let above = arg.ge(self.0)?;
        let pushes_up = grad_res.lt(0.0)?;
        let pass = above.maximum(&pushes_up)?.to_dtype(grad_res.dtype())?;
        Ok(Some(grad_res.mul(&pass)?))
    }
}

/// `max(x, bound)` with a gradient that does not die below the bound.
pub fn lower_bound(x: &Tensor, bound: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LowerBound(bound))?)
}

pub(crate) fn uniform_noise(
    shape: &[usize],
    dtype: DType,
    device: &candle_core::Device,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Zero-mean Gaussian conditional: the mass of `N(0, sigma^2)` on
/// `[y - 0.5, y + 0.5]`, with `sigma` floored at [`SCALE_FLOOR`].
#[derive(Debug, Clone, Default)]
pub struct GaussianConditional;

impl GaussianConditional {
    pub fn likelihood(&self, y_hat: &Tensor, scales: &Tensor) -> Result<Tensor> {
        if y_hat.dims() != scales.dims() {
            return Err(Error::Shape(format!(
                "gaussian conditional: values {:?} vs scales {:?}",
                y_hat.dims(),
                scales.dims()
            )));
        }
        let scales = lower_bound(scales, SCALE_FLOOR)?;
        // symmetric: evaluate in the lower tail for precision
        let values = y_hat.abs()?;
        let upper = standard_normal_cdf(&((0.5 - &values)? / &scales)?)?;
        let lower = standard_normal_cdf(&((-0.5 - &values)? / &scales)?)?;
        lower_bound(&(upper - lower)?, LIKELIHOOD_FLOOR)
    }

    pub fn quantize(&self, y: &Tensor, mode: ForwardMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match mode {
            ForwardMode::Train => {
                let noise = uniform_noise(y.dims(), y.dtype(), y.device(), rng)?;
                Ok((y + noise)?)
            }
            ForwardMode::Eval => Ok(y.round()?),
        }
    }
}

/// Per-channel learned monotone CDF (a small elementwise network whose
/// weights pass through softplus), used as the prior over the hyper-latent.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    channels: usize,
    filters: Vec<usize>,
    matrices: Vec<Var>,
    biases: Vec<Var>,
    factors: Vec<Var>,
    quantiles: Var,
}

impl FactorizedPrior {
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        channels: usize,
        filters: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(1).chain(filters.iter().copied()).chain(std::iter::once(1)).collect();
        let scale = INIT_SCALE.powf(1.0 / (filters.len() + 1) as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..filters.len() + 1 {
            let init = (1.0 / scale / widths[i + 1] as f64).exp_m1().ln();
            matrices.push(params.constant(
                &format!("{prefix}.matrices.{i}"),
                &[channels, widths[i + 1], widths[i]],
                init,
            )?);
            biases.push(params.uniform(&format!("{prefix}.biases.{i}"), &[channels, widths[i + 1], 1], 0.5, rng)?);
            if i < filters.len() {
                factors.push(params.constant(&format!("{prefix}.factors.{i}"), &[channels, widths[i + 1], 1], 0.0)?);
            }
        }
        let quantile_values = (0..channels).flat_map(|_| [-INIT_SCALE, 0.0, INIT_SCALE]).collect();
        let quantiles = params.insert_values(&format!("{prefix}.quantiles"), quantile_values, &[channels, 1, 3])?;
        Ok(Self { channels, filters: filters.to_vec(), matrices, biases, factors, quantiles })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn quantiles(&self) -> &Var {
        &self.quantiles
    }

    /// Per-channel medians, shape `(C,)`.
    pub fn medians(&self) -> Result<Tensor> {
        Ok(self.quantiles.narrow(2, 1, 1)?.flatten_all()?.detach())
    }

    /// Logits of the cumulative for `inputs` of shape `(C, 1, K)`.
    fn logits_cumulative(&self, inputs: &Tensor, detach_weights: bool) -> Result<Tensor> {
        let pick = |v: &Var| -> Tensor {
            if detach_weights {
                v.as_tensor().detach()
            } else {
                v.as_tensor().clone()
            }
        };
        let mut logits = inputs.clone();
        for i in 0..self.filters.len() + 1 {
            let matrix = softplus(&pick(&self.matrices[i]))?;
            logits = matrix.matmul(&logits)?;
            logits = logits.broadcast_add(&pick(&self.biases[i]))?;
            if i < self.filters.len() {
                let factor = pick(&self.factors[i]).tanh()?;
                logits = (&logits + factor.broadcast_mul(&logits.tanh()?)?)?;
            }
        }
        Ok(logits)
    }

    /// Mass on `[v - 0.5, v + 0.5]` for `values` of shape `(C, 1, K)`.
    fn interval_mass(&self, values: &Tensor) -> Result<Tensor> {
        let lower = self.logits_cumulative(&(values - 0.5)?, false)?;
        let upper = self.logits_cumulative(&(values + 0.5)?, false)?;
        // flip to the side where both sigmoids are small
        let sign = (&lower + &upper)?.sign()?.neg()?.detach();
        let hi = candle_nn::ops::sigmoid(&(&sign * &upper)?)?;
        let lo = candle_nn::ops::sigmoid(&(&sign * &lower)?)?;
        Ok((hi - lo)?.abs()?)
    }

    /// Quantizes (or perturbs) `z` of shape `(B, C, H, W)` and returns it with
    /// its likelihoods. Eval mode rounds around the learned per-channel median.
    pub fn forward(&self, z: &Tensor, mode: ForwardMode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = z.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("factorized prior has {} channels, input has {c}", self.channels)));
        }
        let z_hat = match mode {
            ForwardMode::Train => {
                let noise = uniform_noise(z.dims(), z.dtype(), z.device(), rng)?;
                (z + noise)?
            }
            ForwardMode::Eval => {
                let medians = self.medians()?.reshape((1, c, 1, 1))?;
                z.broadcast_sub(&medians)?.round()?.broadcast_add(&medians)?
            }
        };
        let values = z_hat.permute((1, 0, 2, 3))?.contiguous()?.reshape((c, 1, b * h * w))?;
        let mass = lower_bound(&self.interval_mass(&values)?, LIKELIHOOD_FLOOR)?;
        let likelihoods = mass.reshape((c, b, h, w))?.permute((1, 0, 2, 3))?.contiguous()?;
        Ok((z_hat, likelihoods))
    }

    /// Quantile-calibration loss: drives the stored quantiles towards the
    /// tail points of the current CDF. Only the quantiles receive gradient.
    pub fn aux_loss(&self) -> Result<Tensor> {
        let logits = self.logits_cumulative(self.quantiles.as_tensor(), true)?;
        let t = (2.0 / TAIL_MASS - 1.0).ln();
        let target =
            Tensor::new(&[-t, 0.0, t], self.quantiles.device())?.to_dtype(logits.dtype())?.reshape((1, 1, 3))?;
        Ok(logits.broadcast_sub(&target)?.abs()?.sum_all()?)
    }
}

/// `log(1 + exp(x))` in the overflow-safe form `max(x, 0) + log(1 + exp(-|x|))`.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((x.relu()? + tail)?)
}
