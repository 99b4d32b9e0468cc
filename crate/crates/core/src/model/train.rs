use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::corpus::BatchSampler;
use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, CosineSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Final learning rate of the cosine decay, as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            seq_len: 128,
            lr: 3e-3,
            warmup_steps: 20,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            peak_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            min_ratio: self.min_lr_ratio,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            max_grad_norm: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, value) in [("batch_size", self.batch_size), ("seq_len", self.seq_len)] {
            if value == 0 {
                return Err(Error::config(&[key], "must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(&["lr"], "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Training loss of the step's batch before the update, in bits per byte.
    pub loss_bpc: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    sampler: BatchSampler,
    step: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer(), model.params());
        Ok(Trainer {
            model,
            optimizer,
            sampler: BatchSampler::new(config.seed),
            config,
            step: 0,
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint, restoring weights, moments, step and the
    /// sampler position.
    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        let config =
            checkpoint.train.ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let model = checkpoint.model()?;
        let mut trainer = Trainer::new(model, config)?;
        trainer.optimizer = checkpoint.optimizer(&trainer.model)?;
        trainer.step = checkpoint.step;
        if let Some(state) = checkpoint.rng {
            trainer.sampler = BatchSampler::from_rng(state.restore());
        }
        Ok(trainer)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn sampler(&self) -> &BatchSampler {
        &self.sampler
    }

    /// One optimizer update on a freshly sampled batch of `data`.
    pub fn train_step(&mut self, data: &[u8]) -> Result<StepMetrics> {
        let c = self.config;
        let batch = self.sampler.sample(data, c.batch_size, c.seq_len)?;
        self.model.zero_grad();
        let loss = self.model.loss(&batch.inputs, &batch.targets, batch.batch)?;
        let nats = loss.item()?;
        if !nats.is_finite() {
            return Err(Error::Divergence { step: self.step, loss: nats });
        }
        loss.backward()?;
        let lr = c.schedule().lr(self.step);
        let grad_norm = self.optimizer.update(self.model.params_mut(), lr)?;
        let metrics = StepMetrics {
            step: self.step,
            loss_bpc: nats / std::f64::consts::LN_2,
            lr,
            grad_norm,
            elapsed_s: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until `config.steps`, writing `step_<n>.ckpt` into
    /// `checkpoint_dir` at the configured interval and calling `on_step`
    /// after every update.
    pub fn run(
        &mut self,
        data: &[u8],
        checkpoint_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            let metrics = self.train_step(data)?;
            on_step(&metrics);
            history.push(metrics);
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.step.is_multiple_of(every) {
                    self.checkpoint().save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some((self.config, &self.optimizer, &self.sampler)), self.step)
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}
