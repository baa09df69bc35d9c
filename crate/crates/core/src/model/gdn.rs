//! Generalized divisive normalization.
//!
//! Forward: `y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)`,
//! inverse: `y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j^2)`, evaluated
//! independently at every spatial position.
//!
//! The layer stores `beta` and `gamma` through a non-negative
//! reparameterization: the stored value `s` maps to `max(s, bound)^2 - pedestal`,
//! so `beta >= beta_min > 0` and `gamma >= 0` hold after every optimizer step.

use candle_core::{Tensor, Var};

use super::entropy::lower_bound;
use super::layers::LayerSpec;
use super::params::ParamStore;
use crate::error::{Error, Result};

const REPARAM_OFFSET: f64 = 1.0 / (1u64 << 18) as f64;
const BETA_MIN: f64 = 1e-6;
const GAMMA_INIT: f64 = 0.1;

/// Effective (already constrained) GDN parameters.
#[derive(Debug, Clone)]
pub struct GdnParams {
    /// Shape `(C,)`, strictly positive.
    pub beta: Tensor,
    /// Shape `(C, C)`, row `i` weights the squared inputs feeding channel `i`.
    pub gamma: Tensor,
}

/// Applies GDN (or its inverse) to a `(B, C, H, W)` tensor.
pub fn gdn(x: &Tensor, params: &GdnParams, inverse: bool) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let beta_len = params.beta.dims1()?;
    let (g0, g1) = params.gamma.dims2()?;
    if beta_len != c || g0 != c || g1 != c {
        return Err(Error::Shape(format!("gdn: input has {c} channels, beta has {beta_len}, gamma is {g0}x{g1}")));
    }
    let sq = x.sqr()?.reshape((b, c, h * w))?;
    let norm = params
        .gamma
        .broadcast_matmul(&sq)?
        .broadcast_add(&params.beta.reshape((1, c, 1))?)?
        .sqrt()?
        .reshape((b, c, h, w))?;
    if inverse {
        Ok((x * norm)?)
    } else {
        Ok((x / norm)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct NonNegative {
    bound: f64,
    pedestal: f64,
}

impl NonNegative {
    fn new(minimum: f64) -> Self {
        let pedestal = REPARAM_OFFSET * REPARAM_OFFSET;
        Self { bound: (minimum + pedestal).sqrt(), pedestal }
    }

    fn encode(&self, value: f64) -> f64 {
        (value + self.pedestal).max(self.pedestal).sqrt()
    }

    fn decode(&self, stored: &Tensor) -> Result<Tensor> {
        Ok((lower_bound(stored, self.bound)?.sqr()? - self.pedestal)?)
    }
}

#[derive(Debug, Clone)]
pub struct Gdn {
    beta: Var,
    gamma: Var,
    inverse: bool,
    beta_reparam: NonNegative,
    gamma_reparam: NonNegative,
}

impl Gdn {
    /// GDN layer initialised at `beta = 1`, `gamma = 0.1 I`.
    pub fn new(params: &mut ParamStore, prefix: &str, channels: usize, inverse: bool) -> Result<Self> {
        let beta_reparam = NonNegative::new(BETA_MIN);
        let gamma_reparam = NonNegative::new(0.0);
        let beta = params.constant(&format!("{prefix}.beta"), &[channels], beta_reparam.encode(1.0))?;
        let gamma_values = (0..channels * channels)
            .map(|k| {
                let diag = k / channels == k % channels;
                gamma_reparam.encode(if diag { GAMMA_INIT } else { 0.0 })
            })
            .collect();
        let gamma = params.insert_values(&format!("{prefix}.gamma"), gamma_values, &[channels, channels])?;
        Ok(Self { beta, gamma, inverse, beta_reparam, gamma_reparam })
    }

    pub fn effective_params(&self) -> Result<GdnParams> {
        Ok(GdnParams { beta: self.beta_reparam.decode(&self.beta)?, gamma: self.gamma_reparam.decode(&self.gamma)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        gdn(x, &self.effective_params()?, self.inverse)
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Gdn { channels: self.beta.elem_count(), inverse: self.inverse }
    }
}
