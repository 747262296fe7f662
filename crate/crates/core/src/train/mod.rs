//! Adam with inverse-square-root warmup, gradient clipping, epoch
//! checkpoints and exact resumption.

mod checkpoint;

pub use checkpoint::{
    average_checkpoint_files, average_checkpoints, Checkpoint, CheckpointHeader, Moments, Progress, MAGIC, VERSION,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchConfig, Batches, ParallelCorpus, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Dropout, Tape, Tensor};

/// Linear warmup to `base_lr`, then decay with `1/√step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

/// `base_lr · min(step / warmup, √(warmup / step))`.
pub fn lr_at(sched: &LrSchedule, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Argument("learning-rate steps start at 1".into()));
    }
    let w = sched.warmup_steps.max(1) as f64;
    let s = step as f64;
    Ok(sched.base_lr * (s / w).min((w / s).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Moments,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step: 0,
            moments: Moments { m: zeros(), v: zeros() },
        }
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn update(&mut self, names: &[String], params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.moments.m.len() {
            return Err(Error::Contract(format!(
                "adam: {} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.moments.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::shape("adam", params[i].shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{}`", names[i])));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.moments.m[i].data_mut();
            let v = self.moments.v[i].data_mut();
            for (j, (p, &gj)) in params[i].data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

fn default_epochs() -> u64 {
    10
}
fn default_batch_tokens() -> usize {
    4096
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> u64 {
    4000
}
fn default_clip() -> f64 {
    1.0
}

/// Optimisation settings of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "default_batch_tokens")]
    pub batch_tokens: usize,
    /// Peak learning rate, reached at the end of warmup.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: default_epochs(),
            max_steps: None,
            batch_tokens: default_batch_tokens(),
            lr: default_lr(),
            warmup_steps: default_warmup(),
            clip_norm: default_clip(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_tokens == 0 {
            bad.push("batch_tokens must be positive");
        }
        if !(self.lr > 0.0) {
            bad.push("lr must be positive");
        }
        if self.warmup_steps == 0 {
            bad.push("warmup_steps must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            bad.push("clip_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            bad.push("adam betas must lie in [0, 1) and eps must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub mt_loss: f32,
    pub ae_loss: Option<f32>,
    pub loss: f32,
    pub grad_norm: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
}

/// SplitMix64 finaliser, used to derive per-epoch and per-step seeds.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A model, its optimizer and the position of the run in the data.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainerConfig,
    pub progress: Progress,
    batches: Batches,
}

/// What a call to [`Trainer::run`] produced.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub last_loss: Option<f32>,
}

impl Trainer {
    pub fn new(model: Model, corpus: &ParallelCorpus, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let batches = Self::batches(&model, corpus, &config)?;
        let adam = AdamState::new(model.params().tensors(), config.adam);
        let progress = Progress {
            seed: config.seed,
            ..Progress::default()
        };
        Ok(Trainer {
            model,
            adam,
            config,
            progress,
            batches,
        })
    }

    /// Continues the run saved in `ckpt` on the same corpus.
    pub fn resume(ckpt: &Checkpoint, corpus: &ParallelCorpus, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let model = ckpt.model()?;
        let batches = Self::batches(&model, corpus, &config)?;
        let moments = ckpt
            .moments
            .clone()
            .ok_or_else(|| Error::Incompatible {
                field: "optimizer moments (averaged checkpoints cannot be resumed)".into(),
            })?;
        let adam = AdamState {
            config: config.adam,
            step: ckpt.header.progress.step,
            moments,
        };
        let progress = ckpt.header.progress.clone();
        if progress.seed != config.seed {
            return Err(Error::Incompatible { field: "seed".into() });
        }
        Ok(Trainer {
            model,
            adam,
            config,
            progress,
            batches,
        })
    }

    fn batches(model: &Model, corpus: &ParallelCorpus, config: &TrainerConfig) -> Result<Batches> {
        if corpus.len() == 0 {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let corpus = &model.prepare_corpus(corpus);
        let batches = make_batches(
            corpus,
            &BatchConfig {
                max_tokens: config.batch_tokens,
                mode: model.config().batch_mode(),
            },
        )?;
        if batches.batches.is_empty() {
            return Err(Error::Config(format!(
                "no sentence fits the {}-token batch budget",
                config.batch_tokens
            )));
        }
        Ok(batches)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.batches.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.model,
            Some(self.config.clone()),
            self.progress.clone(),
            Some(self.adam.moments.clone()),
        )
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, batch: &SequenceBatch) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.progress.step + 1;
        let mut tape = Tape::new();
        let bound = self.model.params().bind_masked(&mut tape, &self.model.trainable());
        let mut dropout = Dropout {
            rate: self.model.config().dropout,
            rng: ChaCha8Rng::seed_from_u64(mix(self.config.seed, step)),
        };
        let use_dropout = dropout.rate > 0.0;
        let (loss, breakdown) =
            self.model
                .forward_loss(&mut tape, &bound, batch, use_dropout.then_some(&mut dropout))?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("loss became {} at step {step}", breakdown.total)));
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = bound.vars().iter().map(|&v| grads.tensor_or_zeros(v)).collect();
        let norm = clip_global_norm(&mut g, self.config.clip_norm);
        let lr = lr_at(&self.config.schedule(), step)?;
        let names = self.model.params().names().to_vec();
        self.adam.update(&names, self.model.params_mut().tensors_mut(), &g, lr)?;
        self.progress.step = step;
        let tokens = batch.target_tokens();
        Ok(StepMetrics {
            step,
            epoch: self.progress.epoch,
            lr,
            mt_loss: breakdown.mt_loss,
            ae_loss: breakdown.ae_loss,
            loss: breakdown.total,
            grad_norm: norm,
            tokens,
            tokens_per_sec: tokens as f64 / started.elapsed().as_secs_f64().max(1e-9),
        })
    }

    fn done(&self) -> bool {
        self.progress.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    /// Trains until the epoch or step budget is spent. `on_step` sees every
    /// step; `on_epoch` is called after each completed epoch.
    pub fn run_with(
        &mut self,
        mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<RunSummary> {
        let mut summary = RunSummary::default();
        let start_step = self.progress.step;
        while !self.done() {
            let order = self.batches.epoch_order(mix(self.config.seed, self.progress.epoch));
            while (self.progress.cursor as usize) < order.len() {
                if self.config.max_steps.is_some_and(|m| self.progress.step >= m) {
                    summary.steps = self.progress.step - start_step;
                    return Ok(summary);
                }
                let b = order[self.progress.cursor as usize];
                let batch = self.batches.batches[b].clone();
                let metrics = self.train_step(&batch)?;
                self.progress.cursor += 1;
                summary.last_loss = Some(metrics.loss);
                on_step(&metrics)?;
            }
            self.progress.epoch += 1;
            self.progress.cursor = 0;
            on_epoch(self)?;
        }
        summary.steps = self.progress.step - start_step;
        Ok(summary)
    }

    /// Trains, writing `metrics.jsonl`, one checkpoint per epoch and
    /// `last.ckpt` into `out`.
    pub fn run(&mut self, out: &Path) -> Result<RunSummary> {
        std::fs::create_dir_all(out)?;
        let metrics_path = out.join("metrics.jsonl");
        let file = if self.progress.step > 0 {
            File::options().append(true).create(true).open(&metrics_path)?
        } else {
            File::create(&metrics_path)?
        };
        let mut metrics = BufWriter::new(file);
        let mut written = Vec::new();
        let mut summary = self.run_with(
            |m| {
                serde_json::to_writer(&mut metrics, m)?;
                metrics.write_all(b"\n")?;
                Ok(())
            },
            |t| {
                let path = epoch_checkpoint_path(out, t.progress.epoch);
                t.checkpoint().save(&path)?;
                written.push(path);
                Ok(())
            },
        )?;
        metrics.flush()?;
        if self.progress.step > 0 {
            let last = out.join("last.ckpt");
            self.checkpoint().save(&last)?;
            written.push(last);
        }
        summary.checkpoints = written;
        Ok(summary)
    }
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch{epoch:04}.ckpt"))
}

/// Epoch checkpoints in `dir`, oldest first.
pub fn epoch_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(num) = name.strip_prefix("epoch").and_then(|n| n.strip_suffix(".ckpt")) {
            if let Ok(e) = num.parse() {
                found.push((e, path));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Teacher-forced token accuracy and mean loss over a corpus.
pub fn teacher_forced_accuracy(model: &Model, corpus: &ParallelCorpus, batch_tokens: usize) -> Result<(f64, f64)> {
    let batches = make_batches(
        &model.prepare_corpus(corpus),
        &BatchConfig {
            max_tokens: batch_tokens,
            mode: model.config().batch_mode(),
        },
    )?;
    let (mut correct, mut tokens, mut loss) = (0usize, 0usize, 0.0f64);
    for b in &batches.batches {
        let s = model.score(b)?;
        correct += s.correct;
        tokens += s.tokens;
        loss += s.loss.mt_loss as f64 * s.tokens as f64;
    }
    if tokens == 0 {
        return Err(Error::Argument("no scored tokens".into()));
    }
    Ok((correct as f64 / tokens as f64, loss / tokens as f64))
}
