//! Flat `key=value` run configuration with dotted keys.

use std::fmt::Write as _;

use crate::corpus::SplitFractions;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    /// `vocab_size` is filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub block_size: usize,
    pub splits: SplitFractions,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Backpack,
            model: ModelConfig::nano(0),
            train: TrainConfig::default(),
            block_size: 64,
            splits: SplitFractions::default(),
            seed: 0,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub const KEYS: &[&str] = &[
    "arch",
    "seed",
    "data.block_size",
    "data.dev_fraction",
    "data.test_fraction",
    "model.preset",
    "model.embed_dim",
    "model.num_senses",
    "model.layers",
    "model.heads",
    "model.context_length",
    "model.dropout",
    "train.peak_lr",
    "train.warmup_steps",
    "train.total_steps",
    "train.final_lr_ratio",
    "train.batch_blocks",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.grad_clip",
    "train.eval_interval",
    "train.eval_blocks",
];

impl RunConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "arch" => self.arch = v.parse()?,
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
            }
            "data.block_size" => self.block_size = parse(key, v)?,
            "data.dev_fraction" => self.splits.dev = parse(key, v)?,
            "data.test_fraction" => self.splits.test = parse(key, v)?,
            "model.preset" => {
                let keep = (self.model.vocab_size, self.model.context_length);
                self.model = match v {
                    "nano" => ModelConfig::nano(keep.0),
                    "micro" => ModelConfig::micro(keep.0),
                    "small" => ModelConfig::small(keep.0),
                    other => return Err(Error::Config(format!("unknown preset `{other}`"))),
                };
            }
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.num_senses" => self.model.num_senses = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.context_length" => self.model.context_length = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "train.peak_lr" => self.train.peak_lr = parse(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "train.total_steps" => self.train.total_steps = parse(key, v)?,
            "train.final_lr_ratio" => self.train.final_lr_ratio = parse(key, v)?,
            "train.batch_blocks" => self.train.batch_blocks = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.grad_clip" => {
                self.train.grad_clip = match v {
                    "off" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "train.eval_interval" => self.train.eval_interval = parse(key, v)?,
            "train.eval_blocks" => {
                self.train.eval_blocks = match v {
                    "all" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies every line of a config document; `#` starts a comment line.
    /// A `model.preset` line is applied before the others.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        lines.sort_by_key(|(_, l)| !l.starts_with("model.preset"));
        for (n, l) in lines {
            self.set_pair(l).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.block_size > self.model.context_length {
            return Err(Error::Config(format!(
                "data.block_size {} must be in 1..={}",
                self.block_size, self.model.context_length
            )));
        }
        self.train.validate()
    }

    /// The effective configuration as a config document.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("arch", self.arch.to_string());
        put("seed", self.seed.to_string());
        put("data.block_size", self.block_size.to_string());
        put("data.dev_fraction", self.splits.dev.to_string());
        put("data.test_fraction", self.splits.test.to_string());
        put("model.embed_dim", m.embed_dim.to_string());
        put("model.num_senses", m.num_senses.to_string());
        put("model.layers", m.layers.to_string());
        put("model.heads", m.heads.to_string());
        put("model.context_length", m.context_length.to_string());
        put("model.dropout", m.dropout.to_string());
        put("train.peak_lr", t.peak_lr.to_string());
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.total_steps", t.total_steps.to_string());
        put("train.final_lr_ratio", t.final_lr_ratio.to_string());
        put("train.batch_blocks", t.batch_blocks.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.beta1", t.beta1.to_string());
        put("train.beta2", t.beta2.to_string());
        put("train.eps", t.eps.to_string());
        put("train.grad_clip", t.grad_clip.map_or("off".into(), |c| c.to_string()));
        put("train.eval_interval", t.eval_interval.to_string());
        put("train.eval_blocks", t.eval_blocks.map_or("all".into(), |c| c.to_string()));
        s
    }
}
