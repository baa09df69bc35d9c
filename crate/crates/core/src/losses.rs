//! Rate-distortion cost and teacher-student distillation losses.
//!
//! All losses are built from tensors so they can be back-propagated, and
//! also report their unweighted terms as `f64` in a [`LossBreakdown`].

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CompressionOutputs;

/// RD Lagrange multipliers of the eight pre-trained MSE models, by quality 1..=8.
pub const QUALITY_LAMBDAS: [f64; 8] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800];

/// Peak value of the 8-bit scale the distortion is weighted at.
const PEAK_SQUARED: f64 = 255.0 * 255.0;

pub fn rd_lambda_for_quality(quality: u8) -> Result<f64> {
    match quality {
        1..=8 => Ok(QUALITY_LAMBDAS[quality as usize - 1]),
        _ => Err(Error::config("rd_quality", format!("{quality} is outside 1-8"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossForm {
    /// Latent + reconstruction + RD.
    L1,
    /// Latent + hyper-latent + reconstruction + RD.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentDivergence {
    #[default]
    Mse,
    /// KL between per-channel spatial softmax distributions.
    Kl,
}

/// Loss hyperparameters. In the L1 form `lambda2` weights the reconstruction
/// term and `lambda3` the RD term; in the L2 form `lambda2` weights the
/// hyper-latent term, `lambda3` the reconstruction and `lambda4` the RD term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(default)]
    pub lambda4: Option<f64>,
    pub rd_lambda: f64,
    pub loss_form: LossForm,
    #[serde(default)]
    pub latent_divergence: LatentDivergence,
}

impl KdWeights {
    pub fn l1(lambda1: f64, lambda2: f64, lambda3: f64, rd_lambda: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4: None,
            rd_lambda,
            loss_form: LossForm::L1,
            latent_divergence: LatentDivergence::Mse,
        }
    }

    pub fn l2(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64, rd_lambda: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4: Some(lambda4),
            rd_lambda,
            loss_form: LossForm::L2,
            latent_divergence: LatentDivergence::Mse,
        }
    }

    /// `(0.2, 0.2, 0.4)` at the given RD multiplier.
    pub fn default_l1(rd_lambda: f64) -> Self {
        Self::l1(0.2, 0.2, 0.4, rd_lambda)
    }

    pub fn with_divergence(mut self, divergence: LatentDivergence) -> Self {
        self.latent_divergence = divergence;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be a non-negative real, got {v}")));
            }
        }
        match (self.loss_form, self.lambda4) {
            (LossForm::L1, Some(_)) => return Err(Error::config("lambda4", "only allowed with loss_form L2")),
            (LossForm::L2, None) => return Err(Error::config("lambda4", "required with loss_form L2")),
            (_, Some(v)) if !(v >= 0.0 && v.is_finite()) => {
                return Err(Error::config("lambda4", format!("must be non-negative, got {v}")))
            }
            _ => {}
        }
        if !(self.rd_lambda > 0.0 && self.rd_lambda.is_finite()) {
            return Err(Error::config("rd_lambda", "must be positive"));
        }
        Ok(())
    }

    fn coefficients(&self) -> TermWeights {
        match self.loss_form {
            LossForm::L1 => {
                TermWeights { latent: self.lambda1, hyper_latent: 0.0, reconstruction: self.lambda2, rd: self.lambda3 }
            }
            LossForm::L2 => TermWeights {
                latent: self.lambda1,
                hyper_latent: self.lambda2,
                reconstruction: self.lambda3,
                rd: self.lambda4.unwrap_or(0.0),
            },
        }
    }
}

/// Coefficient applied to each unweighted term of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub latent: f64,
    pub hyper_latent: f64,
    pub reconstruction: f64,
    pub rd: f64,
}

/// Unweighted terms of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub latent_term: f64,
    pub hyper_latent_term: f64,
    pub reconstruction_term: f64,
    /// Estimated rate in bits per pixel.
    pub rate_term: f64,
    /// MSE on the `[0, 1]` scale.
    pub distortion_term: f64,
    pub rd_term: f64,
    pub weights: TermWeights,
}

impl LossBreakdown {
    pub fn recomposed_total(&self) -> f64 {
        self.weights.latent * self.latent_term
            + self.weights.hyper_latent * self.hyper_latent_term
            + self.weights.reconstruction * self.reconstruction_term
            + self.weights.rd * self.rd_term
    }
}

/// A differentiable loss value with its diagnostic decomposition.
#[derive(Debug, Clone)]
pub struct Loss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Rate, distortion and their combination for one forward pass.
#[derive(Debug, Clone)]
pub struct RdLoss {
    pub rd: Tensor,
    /// Bits per pixel.
    pub rate: Tensor,
    pub distortion: Tensor,
}

impl RdLoss {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        Ok((scalar(&self.rd)?, scalar(&self.rate)?, scalar(&self.distortion)?))
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_likelihoods(name: &str, l: &Tensor) -> Result<()> {
    if l.elem_count() == 0 {
        return Ok(());
    }
    let flat = l.flatten_all()?.to_dtype(DType::F64)?;
    let lo = flat.min(0)?.to_scalar::<f64>()?;
    let hi = flat.max(0)?.to_scalar::<f64>()?;
    if !(lo > 0.0 && hi <= 1.0) {
        return Err(Error::NumericInput(format!("{name} likelihoods must lie in (0, 1], found range [{lo}, {hi}]")));
    }
    Ok(())
}

fn total_bits(l: &Tensor) -> Result<Tensor> {
    if l.elem_count() == 0 {
        return Ok(Tensor::zeros((), l.dtype(), l.device())?);
    }
    Ok((l.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?)
}

/// Estimated rate (bpp) of a pair of likelihood tensors over `num_pixels`.
pub fn rate_bpp(y_likelihoods: &Tensor, z_likelihoods: &Tensor, num_pixels: usize) -> Result<Tensor> {
    if num_pixels == 0 {
        return Err(Error::Precondition("num_pixels must be positive".into()));
    }
    check_likelihoods("y", y_likelihoods)?;
    check_likelihoods("z", z_likelihoods)?;
    let bits = (total_bits(y_likelihoods)? + total_bits(z_likelihoods)?.to_dtype(y_likelihoods.dtype())?)?;
    Ok((bits / num_pixels as f64)?)
}

fn mse(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b.to_dtype(a.dtype())?)?.sqr()?.mean_all()?)
}

/// `rate + rd_lambda * 255^2 * MSE(x_hat, x)`, rate in bpp over the batch.
pub fn rd_loss(outputs: &CompressionOutputs, x: &Tensor, rd_lambda: f64) -> Result<RdLoss> {
    let (b, _, h, w) = x.dims4()?;
    let rate = rate_bpp(&outputs.y_likelihoods, &outputs.z_likelihoods, b * h * w)?;
    let distortion = mse(&outputs.x_hat, x, "reconstruction vs input")?;
    let rd = (&rate + (&distortion * (rd_lambda * PEAK_SQUARED))?)?;
    Ok(RdLoss { rd, rate, distortion })
}

/// Mean over (batch, channel) of `KL(student || teacher)` between spatial
/// softmax distributions of each latent channel.
pub fn latent_kl(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = student.dims4()?;
    let s = student.reshape((b, c, h * w))?;
    let t = teacher.to_dtype(student.dtype())?.reshape((b, c, h * w))?;
    let log_s = candle_nn::ops::log_softmax(&s, D::Minus1)?;
    let log_t = candle_nn::ops::log_softmax(&t, D::Minus1)?;
    let kl = (log_s.exp()? * (&log_s - &log_t)?)?.sum(D::Minus1)?;
    Ok(kl.mean_all()?)
}

fn latent_term(student: &Tensor, teacher: &Tensor, divergence: LatentDivergence) -> Result<Tensor> {
    if student.dims() != teacher.dims() {
        return Err(Error::DistillationCompat(format!(
            "student latent {:?} vs teacher latent {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    match divergence {
        LatentDivergence::Mse => mse(student, teacher, "latent"),
        LatentDivergence::Kl => latent_kl(student, teacher),
    }
}

struct Targets<'a> {
    latent: &'a Tensor,
    hyper_latent: Option<&'a Tensor>,
    reconstruction: &'a Tensor,
}

fn distill(student: &CompressionOutputs, targets: Targets<'_>, x: &Tensor, w: &KdWeights) -> Result<Loss> {
    w.validate()?;
    let coeffs = w.coefficients();
    let rd = rd_loss(student, x, w.rd_lambda)?;
    let latent = latent_term(&student.y_hat, targets.latent, w.latent_divergence)?;
    let recon = mse(&student.x_hat, targets.reconstruction, "student vs teacher reconstruction")?;
    let hyper = match targets.hyper_latent {
        Some(t) => {
            if student.z_hat.dims() != t.dims() {
                return Err(Error::DistillationCompat(format!(
                    "student hyper-latent {:?} vs teacher hyper-latent {:?}",
                    student.z_hat.dims(),
                    t.dims()
                )));
            }
            Some(mse(&student.z_hat, t, "hyper-latent")?)
        }
        None => None,
    };

    let mut total = ((&latent * coeffs.latent)? + (&recon * coeffs.reconstruction)?)?;
    if let Some(h) = &hyper {
        total = (total + (h * coeffs.hyper_latent)?)?;
    }
    total = (total + (&rd.rd * coeffs.rd)?)?;

    let (rd_value, rate, distortion) = rd.values()?;
    let breakdown = LossBreakdown {
        total: scalar(&total)?,
        latent_term: scalar(&latent)?,
        hyper_latent_term: hyper.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
        reconstruction_term: scalar(&recon)?,
        rate_term: rate,
        distortion_term: distortion,
        rd_term: rd_value,
        weights: coeffs,
    };
    Ok(Loss { total, breakdown })
}

/// Plain RD training objective wrapped as a [`Loss`].
pub fn rd_only(outputs: &CompressionOutputs, x: &Tensor, rd_lambda: f64) -> Result<Loss> {
    let rd = rd_loss(outputs, x, rd_lambda)?;
    let (rd_value, rate, distortion) = rd.values()?;
    Ok(Loss {
        total: rd.rd,
        breakdown: LossBreakdown {
            total: rd_value,
            latent_term: 0.0,
            hyper_latent_term: 0.0,
            reconstruction_term: 0.0,
            rate_term: rate,
            distortion_term: distortion,
            rd_term: rd_value,
            weights: TermWeights { latent: 0.0, hyper_latent: 0.0, reconstruction: 0.0, rd: 1.0 },
        },
    })
}

/// `λ1·D(ŷ_s, ŷ_t) + λ2·MSE(x̂_s, x̂_t) + λ3·RD`.
pub fn kd_loss_l1(
    student: &CompressionOutputs,
    teacher: &CompressionOutputs,
    x: &Tensor,
    w: &KdWeights,
) -> Result<Loss> {
    if w.loss_form != LossForm::L1 {
        return Err(Error::config("loss_form", "kd_loss_l1 needs the L1 form"));
    }
    distill(student, Targets { latent: &teacher.y_hat, hyper_latent: None, reconstruction: &teacher.x_hat }, x, w)
}

/// `λ1·D(ŷ_s, ŷ_t) + λ2·MSE(ẑ_s, ẑ_t) + λ3·MSE(x̂_s, x̂_t) + λ4·RD`.
pub fn kd_loss_l2(
    student: &CompressionOutputs,
    teacher: &CompressionOutputs,
    x: &Tensor,
    w: &KdWeights,
) -> Result<Loss> {
    hybrid_kd_loss(student, teacher, teacher, x, w)
}

/// The L2 form with the hyper-latent target taken from `teacher_b` and every
/// other target from `teacher_a`.
pub fn hybrid_kd_loss(
    student: &CompressionOutputs,
    teacher_a: &CompressionOutputs,
    teacher_b: &CompressionOutputs,
    x: &Tensor,
    w: &KdWeights,
) -> Result<Loss> {
    if w.loss_form != LossForm::L2 {
        return Err(Error::config("loss_form", "hyper-latent distillation needs the L2 form"));
    }
    distill(
        student,
        Targets { latent: &teacher_a.y_hat, hyper_latent: Some(&teacher_b.z_hat), reconstruction: &teacher_a.x_hat },
        x,
        w,
    )
}
