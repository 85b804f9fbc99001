//! Training loop: data, AdamW, schedule, metrics and checkpointing.

pub mod config;
pub mod data;
pub mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub use config::{Preset, TrainConfig};
pub use data::{ingest, mask_at_insert, tokenize, Batch, Dataset};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};

use crate::checkpoint;
use crate::diagnostics::mean_nll;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{Scalar, Tape};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Forward batch size used for evaluation passes.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// 1-based step number.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub eval_loss: f64,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    loss: f64,
    lr: f64,
    first_sequence: &'a [usize],
    param_max_abs: BTreeMap<String, f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub data: Dataset,
    opt: AdamW,
    step: usize,
    batch_size: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let tokens = ingest(&config.corpus)?;
        Self::from_tokens(config, tokens)
    }

    pub fn from_tokens(config: TrainConfig, tokens: Vec<u16>) -> Result<Self> {
        config.validate()?;
        let mc = config.model_config()?;
        let model = Model::new(mc)?;
        let data = Dataset::new(tokens, mc.n_ctx, config.val_fraction, config.seed)?;
        let opt = AdamW::new(&model, config.adamw());
        let batch_size = config.batch_tokens / mc.n_ctx;
        Ok(Self { config, model, data, opt, step: 0, batch_size })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let n_ctx = self.model.config.n_ctx;
        let mut batch = self.data.next_batch(self.batch_size);
        mask_at_insert(&mut batch, self.config.mask_at, n_ctx)?;
        let step = self.step + 1;
        let lr = self.config.schedule().lr_at(step);

        let mut tape = Tape::new();
        let (loss, out) = self.model.loss(&mut tape, &batch.inputs, &batch.targets)?;
        let loss_value = tape.value(loss).item()?.f64();
        if !loss_value.is_finite() {
            let dump = self.write_dump(step, loss_value, lr, &batch)?;
            return Err(Error::NonFiniteLoss { step, dump });
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<f32>> = out.params.iter().map(|&v| grads.get_or_zeros(v, tape.value(v).numel())).collect();
        let grad_norm = clip_global_norm(&mut g, self.config.grad_clip);
        self.opt.step(&mut self.model, &g, lr);
        self.step = step;
        Ok(StepStats { step, loss: loss_value, lr, grad_norm })
    }

    fn write_dump(&self, step: usize, loss: f64, lr: f64, batch: &Batch) -> Result<PathBuf> {
        let mut param_max_abs = BTreeMap::new();
        self.model.visit(&mut |name, _, t| {
            let m = t.data().iter().map(|x| x.f64().abs()).fold(0.0, f64::max);
            param_max_abs.insert(name.to_string(), m);
        });
        let dump = NonFiniteDump { step, loss, lr, first_sequence: &batch.inputs[0], param_max_abs };
        fs::create_dir_all(&self.config.out_dir)?;
        let path = self.config.out_dir.join(format!("nonfinite-step-{step}.toml"));
        let text = toml::to_string(&dump).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Mean validation NLL over at most `max_windows` windows (all if `None`).
    pub fn eval_loss(&self, max_windows: Option<usize>) -> Result<f64> {
        let n = self.model.config.n_ctx;
        Ok(mean_nll(&self.model, self.data.val_tokens(), n, max_windows, EVAL_BATCH)?.nll)
    }

    /// Trains to `config.steps`, writing metrics, eval log, resolved config
    /// and the final checkpoint under `out_dir`.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let out = self.config.out_dir.clone();
        fs::create_dir_all(&out)?;
        fs::write(out.join(CONFIG_FILE), self.config.to_toml()?)?;
        let mut metrics = csv::Writer::from_path(out.join(METRICS_FILE))?;
        metrics.write_record(["step", "loss", "lr", "wallclock"])?;
        let mut evals = csv::Writer::from_path(out.join(EVAL_FILE))?;
        evals.write_record(["step", "eval_loss"])?;

        let start = Instant::now();
        let mut last = f64::NAN;
        while self.step < self.config.steps {
            let s = self.step()?;
            last = s.loss;
            metrics.write_record(&[
                s.step.to_string(),
                s.loss.to_string(),
                s.lr.to_string(),
                format!("{:.3}", start.elapsed().as_secs_f64()),
            ])?;
            let every = self.config.eval_every;
            if every > 0 && s.step % every == 0 && s.step < self.config.steps {
                let e = self.eval_loss(Some(self.config.eval_windows))?;
                evals.write_record(&[s.step.to_string(), e.to_string()])?;
                evals.flush()?;
                metrics.flush()?;
            }
        }
        let eval_loss = self.eval_loss(None)?;
        evals.write_record(&[self.step.to_string(), eval_loss.to_string()])?;
        metrics.flush()?;
        evals.flush()?;

        let ckpt = out.join(CHECKPOINT_DIR);
        let snapshot = BTreeMap::from([("train_loss".to_string(), last), ("eval_loss".to_string(), eval_loss)]);
        checkpoint::save(&self.model, self.step as u64, &snapshot, &ckpt)?;
        Ok(TrainSummary {
            steps: self.step,
            final_loss: last,
            eval_loss,
            checkpoint: ckpt,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// `train --config` entry point.
pub fn train(config: TrainConfig) -> Result<TrainSummary> {
    Trainer::new(config)?.run()
}

/// Reads a training run's metric log as `(step, loss, lr)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: malformed row", path.display())))
        };
        rows.push((parse(0)? as usize, parse(1)?, parse(2)?));
    }
    Ok(rows)
}
