//! Experiment configuration files (TOML).
//!
//! ```toml
//! tag = "s64-kd"
//! output_dir = "runs"            # the run goes to runs/s64-kd
//!
//! [model]
//! channels_n = 64                # latent_m = 192, hyper width = channels_n
//!
//! [train]
//! steps = 50000
//! rd_quality = 5                 # or rd_lambda = 0.025
//! seed = 0
//!
//! [kd]                           # omit for plain RD training
//! lambda1 = 0.2
//! lambda2 = 0.2
//! lambda3 = 0.4
//!
//! [data]
//! train_root = "data/train"      # indexed with `kdlic index`
//! eval_root = "data/kodak"       # optional final RD evaluation
//! teachers = ["teacher.safetensors"]
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use kdlic::losses::{rd_lambda_for_quality, KdWeights, LatentDivergence, LossForm};
use kdlic::model::{ModelConfig, Role, DEFAULT_LATENT};
use kdlic::trainer::{TrainConfig, LOG_FILE};
use kdlic::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels_n: usize,
    #[serde(default = "default_latent")]
    pub latent_m: usize,
    /// Defaults to `channels_n`.
    #[serde(default)]
    pub hyper_out_channels: Option<usize>,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default)]
    pub prior_filters: Option<Vec<usize>>,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_latent() -> usize {
    DEFAULT_LATENT
}

fn default_role() -> Role {
    Role::Student
}

/// Training options; anything left out takes the trainer's default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub rd_lambda: Option<f64>,
    /// Pre-trained quality level 1-8, mapped to its RD multiplier.
    pub rd_quality: Option<u8>,
    pub batch_size: Option<usize>,
    pub crop: Option<u32>,
    pub lr_initial: Option<f64>,
    pub plateau_patience: Option<u32>,
    pub plateau_threshold: Option<f64>,
    pub lr_min: Option<f64>,
    pub seed: Option<u64>,
    pub eval_interval: Option<u64>,
    pub grad_clip: Option<f64>,
    pub validation_batches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(default)]
    pub lambda4: Option<f64>,
    #[serde(default = "default_form")]
    pub loss_form: LossForm,
    #[serde(default)]
    pub latent_divergence: LatentDivergence,
}

fn default_form() -> LossForm {
    LossForm::L1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_root: PathBuf,
    #[serde(default)]
    pub eval_root: Option<PathBuf>,
    /// One teacher, or two for hybrid distillation (latent/reconstruction
    /// teacher first, hyper-latent teacher second).
    #[serde(default)]
    pub teachers: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tag: String,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub kd: Option<KdSection>,
    pub data: DataSection,
}

/// Command-line replacements for config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub rd_quality: Option<u8>,
    pub rd_lambda: Option<f64>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub tag: Option<String>,
    pub output_dir: Option<PathBuf>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            reason: e.message().to_string(),
        })
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut config = Self::parse(&text, path)?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        config.resolve_paths(&std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf()));
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.train_root);
        if let Some(p) = self.data.eval_root.as_mut() {
            fix(p);
        }
        self.data.teachers.iter_mut().for_each(fix);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(q) = o.rd_quality {
            self.train.rd_quality = Some(q);
            self.train.rd_lambda = None;
        }
        if let Some(l) = o.rd_lambda {
            self.train.rd_lambda = Some(l);
            self.train.rd_quality = None;
        }
        if let Some(s) = o.steps {
            self.train.steps = s;
        }
        if let Some(s) = o.seed {
            self.train.seed = Some(s);
        }
        if let Some(t) = &o.tag {
            self.tag = t.clone();
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    pub fn rd_lambda(&self) -> Result<f64> {
        match (self.train.rd_lambda, self.train.rd_quality) {
            (Some(_), Some(_)) => Err(Error::config("train.rd_lambda", "set either rd_lambda or rd_quality, not both")),
            (Some(l), None) => Ok(l),
            (None, Some(q)) => rd_lambda_for_quality(q),
            (None, None) => Err(Error::config("train.rd_lambda", "missing (or give train.rd_quality)")),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::new(m.channels_n, m.latent_m, m.hyper_out_channels.unwrap_or(m.channels_n), m.role);
        if let Some(f) = &m.prior_filters {
            c.prior_filters = f.clone();
        }
        c
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.tag)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let rd_lambda = self.rd_lambda()?;
        let t = &self.train;
        let mut c = TrainConfig::new(t.steps, rd_lambda);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = t.$f { c.$f = v; } )* };
        }
        take!(
            batch_size,
            crop,
            lr_initial,
            plateau_patience,
            plateau_threshold,
            lr_min,
            seed,
            eval_interval,
            grad_clip,
            validation_batches
        );
        c.kd = self.kd.as_ref().map(|k| KdWeights {
            lambda1: k.lambda1,
            lambda2: k.lambda2,
            lambda3: k.lambda3,
            lambda4: k.lambda4,
            rd_lambda,
            loss_form: k.loss_form,
            latent_divergence: k.latent_divergence,
        });
        c.teacher_checkpoints = self.data.teachers.clone();
        c.output_dir = Some(self.run_dir());
        Ok(c)
    }

    /// Field checks, referential integrity of every path, and tag uniqueness
    /// within the output directory.
    pub fn validate(&self) -> Result<()> {
        if self.tag.is_empty() || !self.tag.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::config("tag", format!("`{}` must be non-empty [A-Za-z0-9._-]", self.tag)));
        }
        self.model_config().validate()?;
        self.train_config()?.validate()?;
        let must_exist = |field: &str, p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::config(field, format!("{} does not exist", p.display())))
            }
        };
        must_exist("data.train_root", &self.data.train_root)?;
        if let Some(p) = &self.data.eval_root {
            must_exist("data.eval_root", p)?;
        }
        for t in &self.data.teachers {
            must_exist("data.teachers", t)?;
        }
        if self.run_dir().join(LOG_FILE).exists() {
            return Err(Error::config(
                "tag",
                format!("`{}` is already used in {}", self.tag, self.output_dir.display()),
            ));
        }
        Ok(())
    }
}
