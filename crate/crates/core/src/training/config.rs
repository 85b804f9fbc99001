//! Flat key-value training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPath, PositionalMode, DEFAULT_TILE};
use crate::error::{bail, Error, Result};
use crate::model::{ModelConfig, BYTE_VOCAB};
use crate::normalizer::NormalizerMode;
use crate::training::data::check_mask_position;
use crate::training::optim::{AdamWConfig, Schedule};

/// Named starting point for the model fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Baseline,
    Lazy,
    LazyNoPositional,
    LazyNoElastic,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Baseline => ModelConfig::baseline(),
            Preset::Lazy => ModelConfig::lazy(),
            Preset::LazyNoPositional => ModelConfig::lazy().without_positional(),
            Preset::LazyNoElastic => ModelConfig::lazy().without_elastic(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Corpus file or directory; relative paths resolve against the config file.
    pub corpus: PathBuf,
    /// Run directory for metrics and the final checkpoint.
    pub out_dir: PathBuf,
    pub steps: usize,
    pub batch_tokens: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub min_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Mask@k position, 0-based.
    pub mask_at: Option<usize>,
    /// Evaluate every this many steps (0 disables periodic eval).
    pub eval_every: usize,
    /// Validation windows per evaluation.
    pub eval_windows: usize,
    pub val_fraction: f64,

    pub preset: Preset,
    pub layers: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub n_ctx: Option<usize>,
    /// `rope`, `rope-bias` or `alibi`.
    pub positional: Option<String>,
    /// `softmax`, `sparsemax`, `fixed`, `elastic[:τ0]`, `elastic-global[:τ0]`.
    pub normalizer: Option<String>,
    pub rope_base: Option<f64>,
    pub window: Option<usize>,
    /// Key tile of the two-pass path; 0 selects the naive path.
    pub tile: Option<usize>,
    pub freeze_tau: Option<bool>,
    pub freeze_bias: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.txt"),
            out_dir: PathBuf::from("run"),
            steps: 2000,
            batch_tokens: 8 * 128,
            peak_lr: 3e-4,
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            mask_at: None,
            eval_every: 200,
            eval_windows: 64,
            val_fraction: 0.05,
            preset: Preset::Lazy,
            layers: None,
            d_model: None,
            heads: None,
            n_ctx: None,
            positional: None,
            normalizer: None,
            rope_base: None,
            window: None,
            tile: None,
            freeze_tau: None,
            freeze_bias: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file and resolves relative paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.corpus.is_relative() {
            cfg.corpus = base.join(&cfg.corpus);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = self.preset.model();
        m.seed = self.seed;
        m.layers = self.layers.unwrap_or(m.layers);
        m.d_model = self.d_model.unwrap_or(m.d_model);
        m.heads = self.heads.unwrap_or(m.heads);
        m.n_ctx = self.n_ctx.unwrap_or(m.n_ctx);
        if let Some(p) = &self.positional {
            m.positional = p.parse::<PositionalMode>()?;
        }
        if let Some(n) = &self.normalizer {
            m.normalizer = n.parse::<NormalizerMode>()?;
        }
        m.rope_base = self.rope_base.unwrap_or(m.rope_base);
        m.window = self.window.unwrap_or(m.window);
        m.path = match self.tile {
            Some(0) => AttentionPath::Naive,
            Some(t) => AttentionPath::TwoPass { tile: t },
            None if m.normalizer == NormalizerMode::Sparsemax => AttentionPath::Naive,
            None => AttentionPath::TwoPass { tile: DEFAULT_TILE },
        };
        m.freeze_tau = self.freeze_tau.unwrap_or(m.freeze_tau);
        m.freeze_bias = self.freeze_bias.unwrap_or(m.freeze_bias);
        m.vocab = BYTE_VOCAB + usize::from(self.mask_at.is_some());
        m.validate()?;
        Ok(m)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_tokens / self.n_ctx.unwrap_or(self.preset.model().n_ctx)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            min_lr_fraction: self.min_lr_fraction,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model_config()?;
        if self.steps == 0 {
            bail!(Config, "steps must be positive");
        }
        if self.warmup_steps > self.steps {
            bail!(Config, "warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps);
        }
        if self.batch_tokens == 0 || !self.batch_tokens.is_multiple_of(m.n_ctx) {
            bail!(Config, "batch_tokens {} is not a positive multiple of n_ctx {}", self.batch_tokens, m.n_ctx);
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 || !(0.0..=1.0).contains(&self.min_lr_fraction) {
            bail!(Config, "peak_lr must be positive and min_lr_fraction in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "betas must lie in [0, 1)");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            bail!(Config, "val_fraction must lie in (0, 1), got {}", self.val_fraction);
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            bail!(Config, "grad_clip must be positive");
        }
        if let Some(k) = self.mask_at {
            check_mask_position(k, m.n_ctx)?;
        }
        Ok(())
    }
}
