//! AdamW training with warmup and linear decay, dev-set model selection and
//! checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{config_hash, Checkpoint};
pub use optim::{adamw_step, clip_grad_norm, grad_norm, AdamState, AdamW};

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{training_pair, Blocks, Splits};
use crate::error::{Error, Result};
use crate::eval::mean_block_loss;
use crate::model::Trainable;
use crate::scalar::Scalar;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Learning rate reached at `total_steps`, as a fraction of the peak.
    pub final_lr_ratio: f64,
    /// Blocks per optimizer step.
    pub batch_blocks: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub eval_interval: usize,
    /// Evaluate on at most this many dev blocks.
    pub eval_blocks: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 6e-4,
            warmup_steps: 2000,
            total_steps: 500_000,
            final_lr_ratio: 0.1,
            batch_blocks: 8,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: Some(1.0),
            eval_interval: 1000,
            eval_blocks: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return fail("peak_lr and eps must be positive, weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return fail(format!("final_lr_ratio {} outside [0, 1]", self.final_lr_ratio));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("grad_clip must be positive".into());
        }
        if self.batch_blocks == 0 || self.eval_interval == 0 {
            return fail("batch_blocks and eval_interval must be positive".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup from 0 to the peak, then linear decay to
/// `peak * final_lr_ratio` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let frac = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    peak + (peak * cfg.final_lr_ratio - peak) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Dev => "dev",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

pub fn write_loss_csv(records: &[LossRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,split,loss")?;
    for r in records {
        writeln!(w, "{},{},{}", r.step, r.split, r.loss)?;
    }
    Ok(())
}

/// Block indices for `step` (0-based): consecutive slices of per-epoch
/// permutations, each a function of `(seed, epoch)` only.
pub fn batch_indices(step: usize, batch: usize, num_blocks: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut perm: Option<(usize, Vec<usize>)> = None;
    for pos in step * batch..(step + 1) * batch {
        let epoch = pos / num_blocks;
        if perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut p: Vec<usize> = (0..num_blocks).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
            p.shuffle(&mut rng);
            perm = Some((epoch, p));
        }
        out.push(perm.as_ref().unwrap().1[pos % num_blocks]);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Model with the lowest dev loss seen.
    pub best: M,
    pub best_step: usize,
    pub best_dev_loss: f64,
    /// Model after the last completed step.
    pub last: M,
    pub curve: Vec<LossRecord>,
    /// Step at which training stopped because a loss or gradient went non-finite.
    pub diverged_at: Option<usize>,
}

/// Resumable training loop state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar, M: Trainable<T>> {
    pub model: M,
    pub adam: AdamState<T>,
    pub step: usize,
    pub config: TrainConfig,
    pub curve: Vec<LossRecord>,
    best: Option<(usize, f64, M)>,
    diverged_at: Option<usize>,
}

impl<T: Scalar, M: Trainable<T>> Trainer<T, M> {
    pub fn new(model: M, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            adam,
            step: 0,
            config,
            curve: Vec::new(),
            best: None,
            diverged_at: None,
        })
    }

    /// Continues from a checkpoint written by [`checkpoint`](Self::checkpoint).
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model: M = ck.restore()?;
        let adam = ck
            .optimizer_state(&model)?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let step = ck
            .step()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no step".into()))?;
        let mut t = Self::new(model, config)?;
        t.adam = adam;
        t.step = step;
        Ok(t)
    }

    /// Weights, optimizer moments and step.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model)
            .with_optimizer(&self.adam)
            .with_meta("step", self.step)
    }

    pub fn diverged(&self) -> Option<usize> {
        self.diverged_at
    }

    /// One optimizer step on the next batch; returns the mean train loss.
    pub fn step_once(&mut self, train: &Blocks) -> Result<f64> {
        let cfg = &self.config;
        let idx = batch_indices(self.step, cfg.batch_blocks, train.len(), cfg.seed);
        let mut tape = Tape::with_seed(cfg.seed ^ (self.step as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        let vars = self.model.params().register(&mut tape, true);
        let mut losses = Vec::with_capacity(idx.len());
        for &b in &idx {
            let (inputs, targets) = training_pair(&train.blocks[b]);
            losses.push(self.model.sequence_loss(&mut tape, &vars, &inputs, &targets, true)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, T::of(1.0 / idx.len() as f64));
        let loss_value = tape.value(loss).data()[0].as_f64();
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<T>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut g, c);
        }
        let lr = lr_at(self.step + 1, cfg);
        let hp = cfg.optimizer();
        adamw_step(self.model.params_mut(), &g, &mut self.adam, lr, &hp)?;
        self.step += 1;
        Ok(loss_value)
    }

    fn evaluate(&mut self, dev: &Blocks) -> Result<f64> {
        let loss = match self.config.eval_blocks {
            Some(n) if n < dev.len() => mean_block_loss(
                &self.model,
                &Blocks {
                    block_size: dev.block_size,
                    blocks: dev.blocks[..n].to_vec(),
                },
            )?,
            _ => mean_block_loss(&self.model, dev)?,
        };
        self.curve.push(LossRecord {
            step: self.step,
            split: Split::Dev,
            loss,
        });
        if loss.is_finite() && self.best.as_ref().is_none_or(|(_, b, _)| loss < *b) {
            self.best = Some((self.step, loss, self.model.clone()));
        }
        Ok(loss)
    }

    /// Trains until `step == until` (capped at `total_steps`), evaluating on
    /// dev every `eval_interval` steps and at the end.
    pub fn run_until(&mut self, until: usize, splits: &Splits) -> Result<()> {
        let until = until.min(self.config.total_steps);
        if splits.train.is_empty() || splits.dev.is_empty() {
            return Err(Error::Corpus("train and dev splits need at least one block".into()));
        }
        while self.step < until && self.diverged_at.is_none() {
            let prev = self.model.clone();
            match self.step_once(&splits.train) {
                Ok(loss) if loss.is_finite() => {
                    self.curve.push(LossRecord {
                        step: self.step,
                        split: Split::Train,
                        loss,
                    });
                }
                Ok(_) | Err(Error::NonFiniteGradient { .. }) => {
                    log::warn!("non-finite loss or gradient at step {}; stopping", self.step + 1);
                    self.model = prev;
                    self.diverged_at = Some(self.step + 1);
                    break;
                }
                Err(e) => return Err(e),
            }
            if self.step % self.config.eval_interval == 0 || self.step == until {
                let dev = self.evaluate(&splits.dev)?;
                log::info!("step {} lr {:.3e} dev loss {dev:.4}", self.step, lr_at(self.step, &self.config));
                if !dev.is_finite() {
                    self.diverged_at = Some(self.step);
                }
            }
        }
        if self.best.is_none() {
            self.evaluate(&splits.dev)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TrainOutcome<M>> {
        let (best_step, best_dev_loss, best) = self
            .best
            .ok_or_else(|| Error::Diverged { step: self.step })?;
        Ok(TrainOutcome {
            best,
            best_step,
            best_dev_loss,
            last: self.model,
            curve: self.curve,
            diverged_at: self.diverged_at,
        })
    }
}

/// Trains `model` for `config.total_steps` steps.
pub fn train<T: Scalar, M: Trainable<T>>(model: M, splits: &Splits, config: &TrainConfig) -> Result<TrainOutcome<M>> {
    let mut t = Trainer::new(model, config.clone())?;
    t.run_until(config.total_steps, splits)?;
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            total_steps: 10_000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(2000, &cfg), 6e-4);
        assert!((lr_at(10_000, &cfg) - 6e-5).abs() < 1e-18);
        assert!((lr_at(1000, &cfg) - 3e-4).abs() < 1e-18);
        let max = (0..=10_000).map(|s| lr_at(s, &cfg)).fold(0.0, f64::max);
        assert_eq!(max, 6e-4);
    }

    #[test]
    fn config_checks() {
        let mut cfg = TrainConfig {
            total_steps: 100,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.warmup_steps = 10;
        assert!(cfg.validate().is_ok());
        cfg.grad_clip = Some(0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(s, 3, 12, 5)).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_eq!(batch_indices(7, 5, 9, 1), batch_indices(7, 5, 9, 1));
    }
}
