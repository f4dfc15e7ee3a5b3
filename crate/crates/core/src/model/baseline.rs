//! GPT-2 style decoder-only Transformer with a tied LM head.

use super::params::{Decay, Init, ParamStore};
use super::transformer::{gain, zeros, Backbone};
use super::{to_usize, Architecture, LanguageModel, ModelConfig, TokenId, Trainable};
use crate::corpus::RESERVED_IDS;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TransformerLm<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    ln_f_g: usize,
    ln_f_b: usize,
}

impl<T: Scalar> TransformerLm<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(
            &mut store,
            &config,
            config.blocks(Architecture::Baseline),
            RESERVED_IDS,
            &mut init,
        );
        let d = config.embed_dim;
        let ln_f_g = store.push("ln_f.g", gain(d), Decay::Off);
        let ln_f_b = store.push("ln_f.b", zeros(d), Decay::Off);
        Ok(Self {
            config,
            params: store,
            backbone,
            ln_f_g,
            ln_f_b,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.backbone.num_blocks()
    }

    pub fn embedding(&self) -> &Tensor<T> {
        self.params.tensor(self.backbone.wte)
    }

    fn logits_on_tape(&self, tape: &mut Tape<T>, vars: &[Var], ids: &[TokenId], train: bool) -> Result<Var> {
        self.config.check_ids(ids)?;
        let dropout = if train { self.config.dropout } else { 0.0 };
        let h = self
            .backbone
            .forward(tape, vars, &self.config, &to_usize(ids), dropout)?;
        let h = tape.layer_norm(h, vars[self.ln_f_g], vars[self.ln_f_b])?;
        tape.matmul_nt(h, vars[self.backbone.wte])
    }

    pub fn cast<U: Scalar>(&self) -> TransformerLm<U> {
        TransformerLm {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            ln_f_g: self.ln_f_g,
            ln_f_b: self.ln_f_b,
        }
    }
}

impl<T: Scalar> LanguageModel<T> for TransformerLm<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let l = self.logits_on_tape(&mut tape, &vars, ids, false)?;
        Ok(tape.value(l).clone())
    }
}

impl<T: Scalar> Trainable<T> for TransformerLm<T> {
    const ARCHITECTURE: Architecture = Architecture::Baseline;

    fn from_config(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, seed)
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn sequence_loss(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        inputs: &[TokenId],
        targets: &[TokenId],
        train: bool,
    ) -> Result<Var> {
        let l = self.logits_on_tape(tape, vars, inputs, train)?;
        tape.cross_entropy(l, &to_usize(targets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_params, Backpack};

    #[test]
    fn causal_and_counted() {
        let cfg = ModelConfig::nano(20);
        let m = TransformerLm::<f32>::new(cfg.clone(), 1).unwrap();
        assert_eq!(m.num_blocks(), 2);
        assert_eq!(m.params().num_elements(), count_params(&cfg, Architecture::Baseline));
        let a = m.logits(&[3, 4, 5, 6, 7, 8]).unwrap();
        let b = m.logits(&[3, 4, 5, 6, 7, 9]).unwrap();
        for i in 0..5 {
            assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn embedding_shape_matches_paired_backpack() {
        let cfg = ModelConfig::nano(20);
        let t = TransformerLm::<f32>::new(cfg.clone(), 1).unwrap();
        let b = Backpack::<f32>::new(cfg, 1).unwrap();
        assert_eq!(t.embedding().shape(), b.embedding().shape());
    }
}
