//! Pre-norm GPT-2 style decoder blocks shared by both architectures.

use super::params::{Decay, Init, ParamStore};
use super::ModelConfig;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, Var};

#[derive(Clone, Debug)]
pub(crate) struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Token/position embeddings plus a stack of blocks.
#[derive(Clone, Debug)]
pub(crate) struct Backbone {
    pub wte: usize,
    pub wpe: usize,
    blocks: Vec<BlockLayout>,
}

pub(crate) fn gain<T: Scalar>(d: usize) -> crate::tensor::Tensor<T> {
    crate::tensor::Tensor::full(&[d], T::one())
}

pub(crate) fn zeros<T: Scalar>(d: usize) -> crate::tensor::Tensor<T> {
    crate::tensor::Tensor::zeros(&[d])
}

impl Backbone {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        n_blocks: usize,
        reserved_rows: usize,
        init: &mut Init,
    ) -> Self {
        let d = cfg.embed_dim;
        let wte = store.push("wte", init.weight(&[cfg.vocab_size, d]), Decay::SkipRows(reserved_rows));
        let wpe = store.push("wpe", init.weight(&[cfg.context_length, d]), Decay::Off);
        let resid_std = init.std / (2.0 * cfg.layers.max(1) as f64).sqrt();
        let blocks = (0..n_blocks)
            .map(|b| {
                let p = |s: &str| format!("h.{b}.{s}");
                BlockLayout {
                    ln1_g: store.push(p("ln_1.g"), gain(d), Decay::Off),
                    ln1_b: store.push(p("ln_1.b"), zeros(d), Decay::Off),
                    qkv_w: store.push(p("attn.qkv.w"), init.weight(&[d, 3 * d]), Decay::On),
                    qkv_b: store.push(p("attn.qkv.b"), zeros(3 * d), Decay::Off),
                    proj_w: store.push(p("attn.proj.w"), init.normal(&[d, d], resid_std), Decay::On),
                    proj_b: store.push(p("attn.proj.b"), zeros(d), Decay::Off),
                    ln2_g: store.push(p("ln_2.g"), gain(d), Decay::Off),
                    ln2_b: store.push(p("ln_2.b"), zeros(d), Decay::Off),
                    fc_w: store.push(p("mlp.fc.w"), init.weight(&[d, 4 * d]), Decay::On),
                    fc_b: store.push(p("mlp.fc.b"), zeros(4 * d), Decay::Off),
                    fc2_w: store.push(p("mlp.proj.w"), init.normal(&[4 * d, d], resid_std), Decay::On),
                    fc2_b: store.push(p("mlp.proj.b"), zeros(d), Decay::Off),
                }
            })
            .collect();
        Self { wte, wpe, blocks }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Token plus learned position embedding, `[n, d]`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], ids: &[usize]) -> Result<Var> {
        let tok = tape.gather(vars[self.wte], ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(vars[self.wpe], &positions)?;
        tape.add(tok, pos)
    }

    /// Residual stream after every block (no final norm), `[n, d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        cfg: &ModelConfig,
        ids: &[usize],
        dropout: f64,
    ) -> Result<Var> {
        let mut x = self.embed(tape, vars, ids)?;
        x = tape.dropout(x, dropout);
        for block in &self.blocks {
            x = block_forward(tape, vars, block, cfg, x, dropout)?;
        }
        Ok(x)
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    l: &BlockLayout,
    cfg: &ModelConfig,
    x: Var,
    dropout: f64,
) -> Result<Var> {
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let h = tape.layer_norm(x, vars[l.ln1_g], vars[l.ln1_b])?;
    let qkv = linear(tape, h, vars[l.qkv_w], vars[l.qkv_b])?;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for hi in 0..cfg.heads {
        let q = tape.slice_cols(qkv, hi * hd, hd)?;
        let k = tape.slice_cols(qkv, d + hi * hd, hd)?;
        let v = tape.slice_cols(qkv, 2 * d + hi * hd, hd)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, Some(&Mask::Causal))?;
        let a = tape.dropout(a, dropout);
        heads.push(tape.matmul(a, v)?);
    }
    let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let att = linear(tape, att, vars[l.proj_w], vars[l.proj_b])?;
    let att = tape.dropout(att, dropout);
    let x = tape.add(x, att)?;

    let h = tape.layer_norm(x, vars[l.ln2_g], vars[l.ln2_b])?;
    let h = linear(tape, h, vars[l.fc_w], vars[l.fc_b])?;
    let h = tape.gelu(h);
    let h = linear(tape, h, vars[l.fc2_w], vars[l.fc2_b])?;
    let h = tape.dropout(h, dropout);
    tape.add(x, h)
}
