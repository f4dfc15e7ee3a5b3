//! Backpack language model and the paired Transformer baseline.

mod backpack;
mod baseline;
mod count;
mod params;
mod transformer;

pub use backpack::{AlphaHook, AlphaWeights, Backpack, BackpackOutput, Contribution, Decomposition, SenseBank};
pub use baseline::TransformerLm;
pub use count::{core_matrix_params, count_params};
pub use params::{Decay, Param, ParamStore};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Backpack,
    Baseline,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Backpack => "backpack",
            Self::Baseline => "baseline",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backpack" => Ok(Self::Backpack),
            "baseline" | "transformer" => Ok(Self::Baseline),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Shape hyperparameters shared by both architectures.
///
/// `layers` is the depth of the paired Transformer baseline. The Backpack's
/// contextualization backbone uses one block fewer so that the two models
/// carry the same number of contextual parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_senses: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_length: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 6 layers, 6 heads, d = 384, 16 senses.
    pub fn micro(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 384,
            num_senses: 16,
            layers: 6,
            heads: 6,
            context_length: 1024,
            dropout: 0.0,
        }
    }

    /// 12 layers, 12 heads, d = 768, 16 senses.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 768,
            num_senses: 16,
            layers: 12,
            heads: 12,
            context_length: 1024,
            dropout: 0.0,
        }
    }

    /// Desk-scale model used by tests and the synthetic experiments.
    pub fn nano(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            num_senses: 4,
            layers: 2,
            heads: 2,
            context_length: 64,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.num_senses == 0 || self.heads == 0 {
            return fail("vocab_size, embed_dim, num_senses and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.embed_dim % self.num_senses != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_senses {}",
                self.embed_dim, self.num_senses
            ));
        }
        if self.context_length == 0 {
            return fail("context_length must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn sense_dim(&self) -> usize {
        self.embed_dim / self.num_senses
    }

    /// Number of Transformer blocks instantiated for `arch`.
    pub fn blocks(&self, arch: Architecture) -> usize {
        match arch {
            Architecture::Baseline => self.layers,
            Architecture::Backpack => self.layers.saturating_sub(1),
        }
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if ids.len() > self.context_length {
            return Err(Error::ContextLength {
                len: ids.len(),
                max: self.context_length,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Index {
                index: bad as usize,
                bound: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// A causal next-token model.
pub trait LanguageModel<T: Scalar> {
    fn config(&self) -> &ModelConfig;

    /// `[n, |V|]` logits; row `i` scores the token following `ids[i]`.
    fn logits(&self, ids: &[TokenId]) -> Result<Tensor<T>>;
}

/// A model whose parameters can be optimized.
pub trait Trainable<T: Scalar>: LanguageModel<T> + Clone {
    const ARCHITECTURE: Architecture;

    /// Freshly initialized model.
    fn from_config(config: ModelConfig, seed: u64) -> Result<Self>;

    fn architecture(&self) -> Architecture {
        Self::ARCHITECTURE
    }

    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Mean next-token cross-entropy of one sequence, recorded on `tape`.
    /// `vars` are this model's parameters registered on the same tape.
    fn sequence_loss(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        inputs: &[TokenId],
        targets: &[TokenId],
        train: bool,
    ) -> Result<Var>;
}

pub(crate) fn to_usize(ids: &[TokenId]) -> Vec<usize> {
    ids.iter().map(|&t| t as usize).collect()
}
