//! Baseline and distillation training.
//!
//! One optimizer step per batch: Adam on the main parameters with global
//! gradient-norm clipping, plus a separate Adam on the factorized prior's
//! quantiles driven by the auxiliary loss. Evaluation runs every
//! `eval_interval` steps and feeds the plateau learning-rate rule.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::losses::{self, KdWeights, LossBreakdown, LossForm};
use crate::metrics::{estimate_bpp, psnr};
use crate::model::checkpoint::{load_model_file, save_checkpoint, TrainerSnapshot};
use crate::model::{CompressionModel, CompressionOutputs, ForwardMode, Role};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.safetensors";
pub const DIAGNOSTIC_CHECKPOINT: &str = "checkpoint_diagnostic.safetensors";

fn default_batch() -> usize {
    16
}
fn default_crop() -> u32 {
    256
}
fn default_lr() -> f64 {
    1e-4
}
fn default_patience() -> u32 {
    10
}
fn default_threshold() -> f64 {
    1e-4
}
fn default_lr_min() -> f64 {
    1e-6
}
fn default_eval_interval() -> u64 {
    1000
}
fn default_clip() -> f64 {
    1.0
}
fn default_validation_batches() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_crop")]
    pub crop: u32,
    #[serde(default = "default_lr")]
    pub lr_initial: f64,
    /// Evaluations without relative improvement before the LR is halved.
    #[serde(default = "default_patience")]
    pub plateau_patience: u32,
    /// Minimum relative improvement that resets the plateau counter.
    #[serde(default = "default_threshold")]
    pub plateau_threshold: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Lagrange multiplier of the RD objective; must equal `kd.rd_lambda` when both are set.
    pub rd_lambda: f64,
    #[serde(default)]
    pub kd: Option<KdWeights>,
    #[serde(default)]
    pub teacher_checkpoints: Vec<PathBuf>,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Batches drawn from a reserved stream when no validation set is given.
    #[serde(default = "default_validation_batches")]
    pub validation_batches: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(steps: u64, rd_lambda: f64) -> Self {
        Self {
            steps,
            batch_size: default_batch(),
            crop: default_crop(),
            lr_initial: default_lr(),
            plateau_patience: default_patience(),
            plateau_threshold: default_threshold(),
            lr_min: default_lr_min(),
            seed: 0,
            eval_interval: default_eval_interval(),
            rd_lambda,
            kd: None,
            teacher_checkpoints: Vec::new(),
            grad_clip: default_clip(),
            validation_batches: default_validation_batches(),
            output_dir: None,
        }
    }

    /// Two teachers select hybrid distillation.
    pub fn is_hybrid(&self) -> bool {
        self.kd.is_some() && self.teacher_checkpoints.len() == 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.crop == 0 {
            return Err(Error::config("crop", "must be positive"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::config("lr_initial", "must be positive"));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_initial) {
            return Err(Error::config("lr_min", "must be positive and below lr_initial"));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("plateau_patience", "must be positive"));
        }
        if self.plateau_threshold.is_nan() || self.plateau_threshold < 0.0 {
            return Err(Error::config("plateau_threshold", "must be non-negative"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if !(self.rd_lambda > 0.0 && self.rd_lambda.is_finite()) {
            return Err(Error::config("rd_lambda", "must be positive"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if self.teacher_checkpoints.len() > 2 {
            return Err(Error::config("teacher_checkpoints", "at most two teachers are supported"));
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
            if kd.rd_lambda != self.rd_lambda {
                return Err(Error::config(
                    "kd.rd_lambda",
                    format!("{} differs from train.rd_lambda {}", kd.rd_lambda, self.rd_lambda),
                ));
            }
            if self.teacher_checkpoints.is_empty() {
                return Err(Error::config("teacher_checkpoints", "distillation needs at least one teacher"));
            }
            if self.teacher_checkpoints.len() == 2 && kd.loss_form != LossForm::L2 {
                return Err(Error::config("kd.loss_form", "two-teacher (hybrid) distillation needs L2"));
            }
        } else if !self.teacher_checkpoints.is_empty() {
            return Err(Error::config("teacher_checkpoints", "given without kd weights"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub eval_loss: f64,
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub best_eval_loss: f64,
    /// Consecutive evaluations without sufficient improvement.
    pub plateau_count: u32,
    pub history: Vec<EvalRecord>,
    /// Per-step training loss totals, in step order.
    pub losses: Vec<f64>,
    pub teacher_checksums: Vec<String>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            step: 0,
            lr: config.lr_initial,
            best_eval_loss: f64::INFINITY,
            plateau_count: 0,
            history: Vec::new(),
            losses: Vec::new(),
            teacher_checksums: Vec::new(),
        }
    }
}

/// Plateau rule: an evaluation that fails to beat the best loss by the
/// relative threshold increments a counter; at `plateau_patience` the LR
/// halves (floored at `lr_min`) and the counter resets.
pub fn lr_schedule_step(mut state: TrainState, eval_loss: f64, config: &TrainConfig) -> TrainState {
    let improved =
        state.best_eval_loss.is_infinite() || eval_loss < state.best_eval_loss * (1.0 - config.plateau_threshold);
    if improved {
        state.best_eval_loss = eval_loss;
        state.plateau_count = 0;
    } else {
        state.plateau_count += 1;
        if state.plateau_count >= config.plateau_patience {
            state.lr = (state.lr / 2.0).max(config.lr_min);
            state.plateau_count = 0;
        }
    }
    state
}

/// SHA-256 over every parameter's name and value.
pub fn parameter_checksum(model: &CompressionModel) -> Result<String> {
    Ok(hex::encode(Sha256::digest(model.params().fingerprint()?)))
}

/// Checks that a student can be distilled from `teachers`: equal latent
/// width always, equal hyper-latent width when that term is used.
pub fn check_compatibility(student: &CompressionModel, teachers: &[CompressionModel], kd: &KdWeights) -> Result<()> {
    let s = student.config();
    for (i, t) in teachers.iter().enumerate() {
        let tc = t.config();
        if tc.latent_m != s.latent_m {
            return Err(Error::DistillationCompat(format!(
                "teacher {i} has latent width {} but the student has {}",
                tc.latent_m, s.latent_m
            )));
        }
        let hyper_target = kd.loss_form == LossForm::L2 && (teachers.len() == 1 || i == 1);
        if hyper_target && tc.hyper_out_channels != s.hyper_out_channels {
            return Err(Error::DistillationCompat(format!(
                "teacher {i} has hyper-latent width {} but the student has {}",
                tc.hyper_out_channels, s.hyper_out_channels
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step {
        step: u64,
        lr: f64,
        aux_loss: f64,
        #[serde(flatten)]
        loss: &'a LossBreakdown,
    },
    Eval(&'a EvalRecord),
}

struct Output {
    dir: PathBuf,
    log: fs::File,
}

impl Output {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(LOG_FILE);
        let log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(Self { dir: dir.to_path_buf(), log })
    }

    fn write(&mut self, line: &LogLine<'_>) -> Result<()> {
        let mut s = serde_json::to_string(line)?;
        s.push('\n');
        self.log.write_all(s.as_bytes()).map_err(|e| Error::io("writing training log", e))
    }
}

/// Owns a student, optional frozen teachers and the optimizer state.
pub struct Trainer {
    model: CompressionModel,
    config: TrainConfig,
    teachers: Vec<CompressionModel>,
    validation: Vec<Tensor>,
    state: TrainState,
    optimizer: AdamW,
    aux_optimizer: AdamW,
    rng: ChaCha8Rng,
    output: Option<Output>,
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..ParamsAdamW::default() })?)
}

impl Trainer {
    /// Validates `config` and loads its teacher checkpoints.
    pub fn new(model: CompressionModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let teachers = config
            .teacher_checkpoints
            .iter()
            .map(|p| load_model_file(p, Role::Teacher, model.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Self::with_teachers(model, config, teachers)
    }

    /// Uses in-memory teachers instead of `config.teacher_checkpoints`.
    pub fn with_teachers(
        model: CompressionModel,
        config: TrainConfig,
        teachers: Vec<CompressionModel>,
    ) -> Result<Self> {
        let mut check = config.clone();
        check.teacher_checkpoints = teachers.iter().map(|_| PathBuf::new()).collect();
        check.validate()?;
        if let Some(kd) = &config.kd {
            check_compatibility(&model, &teachers, kd)?;
        }
        let mut state = TrainState::new(&config);
        state.teacher_checksums = teachers.iter().map(parameter_checksum).collect::<Result<_>>()?;
        let optimizer = adam(model.main_vars(), config.lr_initial)?;
        let aux_optimizer = adam(model.aux_vars(), config.lr_initial)?;
        let output = config.output_dir.as_deref().map(Output::open).transpose()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            teachers,
            validation: Vec::new(),
            state,
            optimizer,
            aux_optimizer,
            output,
        })
    }

    /// Fixed validation batches for the evaluation loss.
    pub fn set_validation(&mut self, batches: Vec<Tensor>) {
        self.validation = batches;
    }

    pub fn model(&self) -> &CompressionModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    fn loss(&self, student: &CompressionOutputs, x: &Tensor) -> Result<losses::Loss> {
        let Some(kd) = &self.config.kd else {
            return losses::rd_only(student, x, self.config.rd_lambda);
        };
        let targets = self.teachers.iter().map(|t| t.distillation_targets(x)).collect::<Result<Vec<_>>>()?;
        match (kd.loss_form, targets.as_slice()) {
            (LossForm::L1, [t]) => losses::kd_loss_l1(student, t, x, kd),
            (LossForm::L2, [t]) => losses::kd_loss_l2(student, t, x, kd),
            (LossForm::L2, [a, b]) => losses::hybrid_kd_loss(student, a, b, x, kd),
            _ => Err(Error::config("teacher_checkpoints", "teacher count does not fit loss_form")),
        }
    }

    fn clip(&self, grads: &mut GradStore) -> Result<()> {
        let vars = self.model.main_vars();
        let mut sq = 0.0;
        for v in &vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericInput(format!("gradient norm is {norm}")));
        }
        if norm > self.config.grad_clip {
            let scale = self.config.grad_clip / norm;
            for v in &vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(())
    }

    fn abort(&mut self, reason: String) -> Error {
        if let Some(out) = &self.output {
            let path = out.dir.join(DIAGNOSTIC_CHECKPOINT);
            if let Err(e) = save_checkpoint(&path, &self.model, Some(self.snapshot())) {
                log::error!("could not write diagnostic checkpoint: {e}");
            }
        }
        Error::TrainingAborted { step: self.state.step, reason }
    }

    fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot { step: self.state.step, lr: self.state.lr }
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Tensor) -> Result<LossBreakdown> {
        let out = self.model.forward(batch, ForwardMode::Train, &mut self.rng)?;
        let loss = self.loss(&out, batch)?;
        if !loss.breakdown.total.is_finite() {
            let reason = format!("non-finite loss {:?}", loss.breakdown);
            return Err(self.abort(reason));
        }
        let mut grads = loss.total.backward()?;
        if let Err(e) = self.clip(&mut grads) {
            return Err(self.abort(e.to_string()));
        }
        self.optimizer.set_learning_rate(self.state.lr);
        self.optimizer.step(&grads)?;

        let aux = self.model.aux_loss()?;
        let aux_value = aux.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let aux_grads = aux.backward()?;
        self.aux_optimizer.set_learning_rate(self.state.lr);
        self.aux_optimizer.step(&aux_grads)?;

        self.state.step += 1;
        self.state.losses.push(loss.breakdown.total);
        let (step, lr) = (self.state.step, self.state.lr);
        if let Some(o) = self.output.as_mut() {
            o.write(&LogLine::Step { step, lr, aux_loss: aux_value, loss: &loss.breakdown })?;
        }
        Ok(loss.breakdown)
    }

    /// Mean eval-mode RD loss, bpp and PSNR over the validation batches.
    pub fn evaluate(&self) -> Result<EvalRecord> {
        if self.validation.is_empty() {
            return Err(Error::Precondition("no validation batches".into()));
        }
        let (mut loss, mut bpp, mut q) = (0.0, 0.0, 0.0);
        for x in &self.validation {
            let out = self.model.forward_eval(x)?;
            let (rd, _, _) = losses::rd_loss(&out, x, self.config.rd_lambda)?.values()?;
            let (b, _, h, w) = x.dims4()?;
            loss += rd;
            bpp += estimate_bpp(&out, b * h * w)?;
            q += psnr(x, &out.x_hat.to_dtype(x.dtype())?)?;
        }
        let n = self.validation.len() as f64;
        Ok(EvalRecord { step: self.state.step, eval_loss: loss / n, bpp: bpp / n, psnr: q / n })
    }

    fn eval_and_schedule(&mut self) -> Result<()> {
        let record = self.evaluate()?;
        if !record.eval_loss.is_finite() {
            return Err(self.abort(format!("non-finite evaluation loss at step {}", record.step)));
        }
        let improved = record.eval_loss < self.state.best_eval_loss;
        let state = std::mem::replace(&mut self.state, TrainState::new(&self.config));
        self.state = lr_schedule_step(state, record.eval_loss, &self.config);
        if self.state.history.last().is_none_or(|h| h.step < record.step) {
            self.state.history.push(record);
        }
        log::info!(
            "step {}: eval loss {:.5}, {:.4} bpp, {:.2} dB, lr {:.2e}",
            record.step,
            record.eval_loss,
            record.bpp,
            record.psnr,
            self.state.lr
        );
        if let Some(o) = self.output.as_mut() {
            o.write(&LogLine::Eval(&record))?;
        }
        if let Some(o) = &self.output {
            let snap = self.snapshot();
            save_checkpoint(o.dir.join(LATEST_CHECKPOINT), &self.model, Some(snap))?;
            if improved {
                save_checkpoint(o.dir.join(BEST_CHECKPOINT), &self.model, Some(snap))?;
            }
        }
        Ok(())
    }

    /// Runs `config.steps` steps from the dataset, evaluating at step 0,
    /// every `eval_interval` steps and at the end.
    pub fn run(mut self, dataset: &PatchDataset) -> Result<(CompressionModel, TrainState)> {
        if dataset.is_empty() {
            return Err(Error::Precondition("training dataset is empty".into()));
        }
        if dataset.crop() != self.config.crop {
            return Err(Error::config(
                "crop",
                format!("dataset crops {} but config asks for {}", dataset.crop(), self.config.crop),
            ));
        }
        if self.validation.is_empty() {
            let device = self.model.device().clone();
            self.validation = (0..self.config.validation_batches.max(1))
                .map(|i| dataset.sample_batch(u64::MAX - i as u64, self.config.batch_size, &device))
                .collect::<Result<_>>()?;
        }
        self.eval_and_schedule()?;
        while self.state.step < self.config.steps {
            let batch = dataset.sample_batch(self.state.step, self.config.batch_size, self.model.device())?;
            self.step(&batch)?;
            if self.state.step.is_multiple_of(self.config.eval_interval) || self.state.step == self.config.steps {
                self.eval_and_schedule()?;
            }
        }
        self.finish()
    }

    /// Verifies the teachers were not modified and hands back the student.
    pub fn finish(self) -> Result<(CompressionModel, TrainState)> {
        for (t, expected) in self.teachers.iter().zip(&self.state.teacher_checksums) {
            if &parameter_checksum(t)? != expected {
                return Err(Error::TrainingAborted {
                    step: self.state.step,
                    reason: "teacher parameters changed during training".into(),
                });
            }
        }
        if let Some(o) = &self.output {
            save_checkpoint(o.dir.join(LATEST_CHECKPOINT), &self.model, Some(self.snapshot()))?;
        }
        Ok((self.model, self.state))
    }
}

/// Trains `model` on `dataset` with validation batches drawn from a stream
/// the training steps never use.
pub fn train(
    model: CompressionModel,
    dataset: &PatchDataset,
    config: TrainConfig,
) -> Result<(CompressionModel, TrainState)> {
    Trainer::new(model, config)?.run(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(patience: u32) -> TrainConfig {
        let mut c = TrainConfig::new(10, 0.01);
        c.plateau_patience = patience;
        c
    }

    fn run(losses: &[f64], c: &TrainConfig) -> (TrainState, usize) {
        let mut s = TrainState::new(c);
        let mut halvings = 0;
        for &l in losses {
            let before = s.lr;
            s = lr_schedule_step(s, l, c);
            assert!(s.lr <= before);
            if s.lr < before {
                halvings += 1;
            }
        }
        (s, halvings)
    }

    #[test]
    fn improving_losses_keep_lr() {
        let c = cfg(2);
        let (s, h) = run(&[5.0, 4.0, 3.0, 2.0, 1.0], &c);
        assert_eq!(h, 0);
        assert_eq!(s.lr, 1e-4);
    }

    #[test]
    fn constant_loss_for_patience_plus_one_halves() {
        let c = cfg(3);
        let (s, h) = run(&[1.0; 4], &c);
        assert_eq!(h, 1);
        assert_eq!(s.lr, 5e-5);
    }

    #[test]
    fn hand_simulated_sequence_halves_twice() {
        let (_, h) = run(&[1.0, 1.0, 1.0, 0.5, 0.5, 0.5], &cfg(2));
        assert_eq!(h, 2);
    }

    #[test]
    fn lr_floor_applies() {
        let mut c = cfg(1);
        c.lr_min = 4e-5;
        let (s, _) = run(&[1.0; 6], &c);
        assert_eq!(s.lr, 4e-5);
    }

    #[test]
    fn config_invariants() {
        let mut c = TrainConfig::new(10, 0.025);
        assert!(c.validate().is_ok());
        c.kd = Some(KdWeights::default_l1(0.025));
        assert!(c.validate().unwrap_err().to_string().contains("teacher"));
        c.teacher_checkpoints = vec!["a".into(), "b".into()];
        assert!(c.validate().unwrap_err().to_string().contains("L2"));
        c.kd = Some(KdWeights::l2(0.2, 0.2, 0.2, 0.4, 0.025));
        assert!(c.validate().is_ok());
        c.kd = Some(KdWeights::l2(0.2, 0.2, 0.2, 0.4, 0.013));
        assert!(c.validate().unwrap_err().to_string().contains("rd_lambda"));
        let mut c = TrainConfig::new(10, 0.025);
        c.lr_min = 1e-3;
        assert!(c.validate().unwrap_err().to_string().contains("lr_min"));
    }
}
