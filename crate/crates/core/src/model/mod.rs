//! Scale-hyperprior auto-encoder at configurable width.
//!
//! Layer names follow the CompressAI `ScaleHyperprior` state-dict layout
//! (`g_a.0.weight`, `entropy_bottleneck.matrices.0`, ...), which lets
//! pre-trained weights be imported by name.

pub mod checkpoint;
pub mod entropy;
pub mod gdn;
pub mod import;
pub mod layers;
pub mod params;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::entropy::{FactorizedPrior, GaussianConditional};
use self::gdn::Gdn;
use self::layers::{crop, reflect_pad, Conv2d, ConvTranspose2d, Layer, Sequential, TransformInput, TransformSpec};
use self::params::ParamStore;
use crate::error::{Error, Result};

/// Total spatial down-sampling of the main plus hyper path.
pub const STRIDE_MULTIPLE: usize = 64;

/// Latent width shared by every model in the distillation experiments.
pub const DEFAULT_LATENT: usize = 192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

fn default_prior_filters() -> Vec<usize> {
    vec![3, 3, 3, 3]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Conv channel width N.
    pub channels_n: usize,
    /// Latent channels M.
    pub latent_m: usize,
    /// Channels of the last hyper-analysis layer (hyper-latent width).
    pub hyper_out_channels: usize,
    pub role: Role,
    /// Hidden widths of the factorized prior's per-channel CDF network.
    #[serde(default = "default_prior_filters")]
    pub prior_filters: Vec<usize>,
}

impl ModelConfig {
    pub fn new(channels_n: usize, latent_m: usize, hyper_out_channels: usize, role: Role) -> Self {
        Self { channels_n, latent_m, hyper_out_channels, role, prior_filters: default_prior_filters() }
    }

    /// The N=128, M=192 architecture of the quality 1-5 pre-trained models.
    pub fn teacher() -> Self {
        Self::new(128, DEFAULT_LATENT, 128, Role::Teacher)
    }

    /// A student whose hyper path mirrors its own width.
    pub fn student(channels_n: usize) -> Self {
        Self::new(channels_n, DEFAULT_LATENT, channels_n, Role::Student)
    }

    /// A student whose hyper-latent width matches a teacher, as needed for
    /// hyper-latent distillation.
    pub fn student_matching_hyper(channels_n: usize, teacher: &ModelConfig) -> Self {
        Self::new(channels_n, teacher.latent_m, teacher.hyper_out_channels, Role::Student)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_n == 0 {
            return Err(Error::config("channels_n", "must be >= 1"));
        }
        if self.latent_m == 0 {
            return Err(Error::config("latent_m", "must be >= 1"));
        }
        if self.hyper_out_channels == 0 {
            return Err(Error::config("hyper_out_channels", "must be >= 1"));
        }
        if self.prior_filters.contains(&0) {
            return Err(Error::config("prior_filters", "widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Additive uniform noise on latents.
    Train,
    /// Rounding.
    Eval,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct CompressionOutputs {
    /// Reconstruction, same spatial size as the input.
    pub x_hat: Tensor,
    /// Latent before quantization.
    pub y: Tensor,
    /// Noisy (train) or rounded (eval) latent.
    pub y_hat: Tensor,
    /// Noisy or quantized hyper-latent.
    pub z_hat: Tensor,
    pub y_likelihoods: Tensor,
    pub z_likelihoods: Tensor,
}

impl CompressionOutputs {
    /// Copy with every tensor cut from the autograd graph.
    pub fn detach(&self) -> Self {
        Self {
            x_hat: self.x_hat.detach(),
            y: self.y.detach(),
            y_hat: self.y_hat.detach(),
            z_hat: self.z_hat.detach(),
            y_likelihoods: self.y_likelihoods.detach(),
            z_likelihoods: self.z_likelihoods.detach(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompressionModel {
    config: ModelConfig,
    params: ParamStore,
    g_a: Sequential,
    g_s: Sequential,
    h_a: Sequential,
    h_s: Sequential,
    entropy_bottleneck: FactorizedPrior,
    gaussian_conditional: GaussianConditional,
}

/// Builds a freshly initialised model in `f32` on the CPU.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<CompressionModel> {
    CompressionModel::new(config, seed, DType::F32, &Device::Cpu)
}

impl CompressionModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(dtype, device.clone());
        let (n, m, h) = (config.channels_n, config.latent_m, config.hyper_out_channels);

        let mut g_a = Sequential::default();
        let widths = [3, n, n, n, m];
        for i in 0..4 {
            g_a.push(Layer::Conv(Conv2d::new(
                &mut ps,
                &format!("g_a.{}", 2 * i),
                widths[i],
                widths[i + 1],
                5,
                2,
                &mut rng,
            )?));
            if i < 3 {
                g_a.push(Layer::Gdn(Gdn::new(&mut ps, &format!("g_a.{}", 2 * i + 1), n, false)?));
            }
        }

        let mut g_s = Sequential::default();
        let widths = [m, n, n, n, 3];
        for i in 0..4 {
            g_s.push(Layer::ConvTranspose(ConvTranspose2d::new(
                &mut ps,
                &format!("g_s.{}", 2 * i),
                widths[i],
                widths[i + 1],
                5,
                2,
                &mut rng,
            )?));
            if i < 3 {
                g_s.push(Layer::Gdn(Gdn::new(&mut ps, &format!("g_s.{}", 2 * i + 1), n, true)?));
            }
        }

        let mut h_a = Sequential::default();
        h_a.push(Layer::Conv(Conv2d::new(&mut ps, "h_a.0", m, n, 3, 1, &mut rng)?));
        h_a.push(Layer::Relu);
        h_a.push(Layer::Conv(Conv2d::new(&mut ps, "h_a.2", n, n, 5, 2, &mut rng)?));
        h_a.push(Layer::Relu);
        h_a.push(Layer::Conv(Conv2d::new(&mut ps, "h_a.4", n, h, 5, 2, &mut rng)?));

        let mut h_s = Sequential::default();
        h_s.push(Layer::ConvTranspose(ConvTranspose2d::new(&mut ps, "h_s.0", h, n, 5, 2, &mut rng)?));
        h_s.push(Layer::Relu);
        h_s.push(Layer::ConvTranspose(ConvTranspose2d::new(&mut ps, "h_s.2", n, n, 5, 2, &mut rng)?));
        h_s.push(Layer::Relu);
        h_s.push(Layer::Conv(Conv2d::new(&mut ps, "h_s.4", n, m, 3, 1, &mut rng)?));
        h_s.push(Layer::Relu);

        let entropy_bottleneck =
            FactorizedPrior::new(&mut ps, "entropy_bottleneck", h, &config.prior_filters, &mut rng)?;

        Ok(Self {
            config: config.clone(),
            params: ps,
            g_a,
            g_s,
            h_a,
            h_s,
            entropy_bottleneck,
            gaussian_conditional: GaussianConditional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn entropy_bottleneck(&self) -> &FactorizedPrior {
        &self.entropy_bottleneck
    }

    /// Parameters updated by the main rate-distortion optimizer.
    pub fn main_vars(&self) -> Vec<Var> {
        self.params.iter().filter(|(name, _)| !name.ends_with(".quantiles")).map(|(_, v)| v.clone()).collect()
    }

    /// Parameters updated by the auxiliary quantile optimizer.
    pub fn aux_vars(&self) -> Vec<Var> {
        vec![self.entropy_bottleneck.quantiles().clone()]
    }

    pub fn aux_loss(&self) -> Result<Tensor> {
        self.entropy_bottleneck.aux_loss()
    }

    /// Runs the full auto-encoder. `rng` only feeds training noise.
    pub fn forward(&self, x: &Tensor, mode: ForwardMode, rng: &mut ChaCha8Rng) -> Result<CompressionOutputs> {
        let (_, c, height, width) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        let total = x.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::NumericInput("input contains non-finite values".into()));
        }
        let x = x.to_dtype(self.dtype())?;
        let ph = height.div_ceil(STRIDE_MULTIPLE) * STRIDE_MULTIPLE;
        let pw = width.div_ceil(STRIDE_MULTIPLE) * STRIDE_MULTIPLE;
        let padded = reflect_pad(&x, ph, pw)?;

        let y = self.g_a.forward(&padded)?;
        let z = self.h_a.forward(&y.abs()?)?;
        let (z_hat, z_likelihoods) = self.entropy_bottleneck.forward(&z, mode, rng)?;
        let scales = self.h_s.forward(&z_hat)?;
        let y_hat = self.gaussian_conditional.quantize(&y, mode, rng)?;
        let y_likelihoods = self.gaussian_conditional.likelihood(&y_hat, &scales)?;
        let mut x_hat = crop(&self.g_s.forward(&y_hat)?, height, width)?;
        if mode == ForwardMode::Eval {
            x_hat = x_hat.clamp(0.0, 1.0)?;
        }
        Ok(CompressionOutputs { x_hat, y, y_hat, z_hat, y_likelihoods, z_likelihoods })
    }

    /// Eval-mode forward with a fixed RNG (which eval mode never draws from).
    pub fn forward_eval(&self, x: &Tensor) -> Result<CompressionOutputs> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(x, ForwardMode::Eval, &mut rng)
    }

    /// Frozen-teacher targets for distillation: an eval-mode pass whose
    /// `y_hat` is replaced by the pre-quantization latent `y`, so a noisy
    /// student latent is matched against the teacher's continuous latent
    /// rather than a rounding of it. All tensors are detached.
    pub fn distillation_targets(&self, x: &Tensor) -> Result<CompressionOutputs> {
        let mut out = self.forward_eval(x)?.detach();
        out.y_hat = out.y.clone();
        Ok(out)
    }

    /// Layer-level description of the four transforms in execution order.
    pub fn transform_specs(&self) -> Vec<TransformSpec> {
        vec![
            TransformSpec { name: "g_a".into(), input: TransformInput::Image, layers: self.g_a.specs() },
            TransformSpec { name: "h_a".into(), input: TransformInput::Transform(0), layers: self.h_a.specs() },
            TransformSpec { name: "h_s".into(), input: TransformInput::Transform(1), layers: self.h_s.specs() },
            TransformSpec { name: "g_s".into(), input: TransformInput::Transform(0), layers: self.g_s.specs() },
        ]
    }
}

/// Exact number of trainable scalars.
pub fn count_parameters(model: &CompressionModel) -> usize {
    model.params().num_elements()
}

/// Bytes held by the trainable parameters at their storage width.
pub fn memory_bytes(model: &CompressionModel) -> usize {
    model.params().num_bytes()
}
