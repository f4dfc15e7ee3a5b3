//! The Backpack language model.
//!
//! Every token `x` owns `k` context-free sense vectors `C(x)_ℓ`. A causal
//! Transformer produces per-sense weights `α[ℓ, i, j]`, and the output
//! representation at position `i` is the nonnegative mixture
//! `o_i = Σ_j Σ_ℓ α[ℓ, i, j] · C(x_j)_ℓ`, scored against the tied embedding
//! matrix. Because the scoring is linear in `o_i`, each logit row is
//! exactly the sum of per-(position, sense) contributions
//! `α[ℓ, i, j] · Eᵀ C(x_j)_ℓ`.

use super::params::{Decay, Init, ParamStore};
use super::transformer::{gain, zeros, Backbone};
use super::{to_usize, Architecture, LanguageModel, ModelConfig, TokenId, Trainable};
use crate::corpus::RESERVED_IDS;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Mask, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct SenseLayout {
    ctx_ln_g: usize,
    ctx_ln_b: usize,
    ctx_q: usize,
    ctx_k: usize,
    sense_ln_g: usize,
    sense_ln_b: usize,
    up_w: usize,
    up_b: usize,
    down_w: usize,
    down_b: usize,
    proj_w: usize,
    proj_b: usize,
}

#[derive(Clone, Debug)]
pub struct Backpack<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    layout: SenseLayout,
}

/// Contextualization weights, `[k, n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaWeights<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> AlphaWeights<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Contract(format!("alpha must be [k, n, n], got {s:?}")));
        }
        Ok(Self { tensor })
    }

    pub fn num_senses(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, sense: usize, i: usize, j: usize) -> T {
        let n = self.len();
        self.tensor.data()[(sense * n + i) * n + j]
    }

    /// Row `α[sense, i, ..]`.
    pub fn row(&self, sense: usize, i: usize) -> &[T] {
        self.tensor.row(sense * self.len() + i)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }
}

/// Materialized sense vectors for the whole vocabulary, `[|V|, k, d]`.
#[derive(Clone, Debug)]
pub struct SenseBank<T> {
    senses: Tensor<T>,
}

impl<T: Scalar> SenseBank<T> {
    pub fn vocab_size(&self) -> usize {
        self.senses.shape()[0]
    }

    pub fn num_senses(&self) -> usize {
        self.senses.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.senses.shape()[2]
    }

    pub fn sense(&self, token: TokenId, sense: usize) -> &[T] {
        let (k, d) = (self.num_senses(), self.dim());
        let start = (token as usize * k + sense) * d;
        &self.senses.data()[start..start + d]
    }

    /// All `k` sense rows of `token`, `[k, d]`.
    pub fn token(&self, token: TokenId) -> Tensor<T> {
        let (k, d) = (self.num_senses(), self.dim());
        let start = token as usize * k * d;
        Tensor::new(vec![k, d], self.senses.data()[start..start + k * d].to_vec()).expect("shape")
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.senses
    }
}

#[derive(Clone, Debug)]
pub struct BackpackOutput<T> {
    /// `[n, |V|]`.
    pub logits: Tensor<T>,
    pub alpha: AlphaWeights<T>,
    /// `[n, k, d]`.
    pub senses: Tensor<T>,
}

/// Rewrites α before the weighted sum.
pub trait AlphaHook<T: Scalar> {
    /// Elementwise multipliers shaped like `alpha`, or `None` to leave it untouched.
    fn multipliers(&self, alpha: &AlphaWeights<T>) -> Result<Option<Tensor<T>>>;
}

/// One term of a logit row: `weight · Eᵀ C(x_j)_sense`.
#[derive(Clone, Debug)]
pub struct Contribution<T> {
    pub position: usize,
    pub sense: usize,
    pub weight: T,
    pub values: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Decomposition<T> {
    pub position: usize,
    pub logits: Vec<T>,
    pub contributions: Vec<Contribution<T>>,
}

impl<T: Scalar> Decomposition<T> {
    /// Coordinate-wise sum of all contributions.
    pub fn summed(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        for c in &self.contributions {
            for (o, v) in out.iter_mut().zip(&c.values) {
                *o += v.as_f64();
            }
        }
        out
    }

    /// Largest `|Σ contributions − logits|` over the row.
    pub fn max_residual(&self) -> f64 {
        self.summed()
            .iter()
            .zip(&self.logits)
            .map(|(s, l)| (s - l.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) struct Trace {
    pub logits: Var,
    pub alpha: Vec<Var>,
    pub senses: Var,
}

impl<T: Scalar> Backpack<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let k = config.num_senses;
        let backbone = Backbone::build(
            &mut store,
            &config,
            config.blocks(Architecture::Backpack),
            RESERVED_IDS,
            &mut init,
        );
        let layout = SenseLayout {
            ctx_ln_g: store.push("ctx.ln.g", gain(d), Decay::Off),
            ctx_ln_b: store.push("ctx.ln.b", zeros(d), Decay::Off),
            ctx_q: store.push("ctx.q", init.weight(&[d, d]), Decay::On),
            ctx_k: store.push("ctx.k", init.weight(&[d, d]), Decay::On),
            sense_ln_g: store.push("sense.ln.g", gain(d), Decay::Off),
            sense_ln_b: store.push("sense.ln.b", zeros(d), Decay::Off),
            up_w: store.push("sense.up.w", init.weight(&[d, 4 * d]), Decay::On),
            up_b: store.push("sense.up.b", zeros(4 * d), Decay::Off),
            down_w: store.push("sense.down.w", init.weight(&[4 * d, d]), Decay::On),
            down_b: store.push("sense.down.b", zeros(d), Decay::Off),
            proj_w: store.push("sense.proj.w", init.weight(&[d, k * d]), Decay::On),
            proj_b: store.push("sense.proj.b", zeros(k * d), Decay::Off),
        };
        Ok(Self {
            config,
            params: store,
            backbone,
            layout,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.backbone.num_blocks()
    }

    /// Tied embedding table, `[|V|, d]`; row `x` is `E x`.
    pub fn embedding(&self) -> &Tensor<T> {
        self.params.tensor(self.backbone.wte)
    }

    pub fn set_embedding(&mut self, table: Tensor<T>) -> Result<()> {
        let cur = self.embedding();
        if cur.shape() != table.shape() {
            return Err(Error::Shape {
                op: "set_embedding",
                lhs: cur.shape().to_vec(),
                rhs: table.shape().to_vec(),
            });
        }
        *self.params.tensor_mut(self.backbone.wte) = table;
        Ok(())
    }

    /// Zeroes the sense projection (and its bias); every sense then equals
    /// the first-residual output `u(x)`.
    pub fn zero_sense_projection(&mut self) {
        for idx in [self.layout.proj_w, self.layout.proj_b] {
            self.params.tensor_mut(idx).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Zeroes the contextualization K/Q maps, making α uniform over each prefix.
    pub fn zero_contextualization(&mut self) {
        for idx in [self.layout.ctx_q, self.layout.ctx_k] {
            self.params.tensor_mut(idx).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Backpack<U> {
        Backpack {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            layout: self.layout.clone(),
        }
    }

    /// `[n, k·d]` sense rows of `ids`, recorded on `tape`.
    pub(crate) fn senses_on_tape(&self, tape: &mut Tape<T>, vars: &[Var], ids: &[usize]) -> Result<Var> {
        let l = &self.layout;
        let k = self.config.num_senses;
        let e = tape.gather(vars[self.backbone.wte], ids)?;
        let x = tape.layer_norm(e, vars[l.sense_ln_g], vars[l.sense_ln_b])?;
        let x = tape.matmul(x, vars[l.up_w])?;
        let x = tape.add_bias(x, vars[l.up_b])?;
        let x = tape.gelu(x);
        let x = tape.matmul(x, vars[l.down_w])?;
        let x = tape.add_bias(x, vars[l.down_b])?;
        let u = tape.add(e, x)?;
        let p = tape.matmul(u, vars[l.proj_w])?;
        let p = tape.add_bias(p, vars[l.proj_b])?;
        // second residual: u repeated across the k sense rows
        let tiled = if k == 1 { u } else { tape.concat_cols(&vec![u; k])? };
        tape.add(p, tiled)
    }

    /// One `[n, n]` weight matrix per sense.
    pub(crate) fn alpha_on_tape(&self, tape: &mut Tape<T>, vars: &[Var], h: Var, dropout: f64) -> Result<Vec<Var>> {
        let l = &self.layout;
        let dk = self.config.sense_dim();
        let hn = tape.layer_norm(h, vars[l.ctx_ln_g], vars[l.ctx_ln_b])?;
        let q = tape.matmul(hn, vars[l.ctx_q])?;
        let kk = tape.matmul(hn, vars[l.ctx_k])?;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        (0..self.config.num_senses)
            .map(|s| {
                let qs = tape.slice_cols(q, s * dk, dk)?;
                let ks = tape.slice_cols(kk, s * dk, dk)?;
                let scores = tape.matmul_nt(qs, ks)?;
                let scores = tape.scale(scores, scale);
                let a = tape.softmax(scores, Some(&Mask::Causal))?;
                Ok(tape.dropout(a, dropout))
            })
            .collect()
    }

    pub(crate) fn trace(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ids: &[TokenId],
        train: bool,
        hook: Option<&dyn AlphaHook<T>>,
    ) -> Result<Trace> {
        self.config.check_ids(ids)?;
        let ids = to_usize(ids);
        let n = ids.len();
        let d = self.config.embed_dim;
        let dropout = if train { self.config.dropout } else { 0.0 };
        let senses = self.senses_on_tape(tape, vars, &ids)?;
        let h = self.backbone.forward(tape, vars, &self.config, &ids, dropout)?;
        let mut alpha = self.alpha_on_tape(tape, vars, h, dropout)?;
        if let Some(hook) = hook {
            let current = collect_alpha(tape, &alpha)?;
            if let Some(mult) = hook.multipliers(&current)? {
                if mult.shape() != current.tensor().shape() {
                    return Err(Error::Shape {
                        op: "alpha multipliers",
                        lhs: current.tensor().shape().to_vec(),
                        rhs: mult.shape().to_vec(),
                    });
                }
                for (s, a) in alpha.iter_mut().enumerate() {
                    let m = Tensor::new(vec![n, n], mult.data()[s * n * n..(s + 1) * n * n].to_vec())?;
                    let m = tape.constant(m);
                    *a = tape.mul(*a, m)?;
                }
            }
        }
        let mut o: Option<Var> = None;
        for (s, &a) in alpha.iter().enumerate() {
            let sv = tape.slice_cols(senses, s * d, d)?;
            let term = tape.matmul(a, sv)?;
            o = Some(match o {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let o = o.expect("at least one sense");
        let logits = tape.matmul_nt(o, vars[self.backbone.wte])?;
        Ok(Trace { logits, alpha, senses })
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<BackpackOutput<T>> {
        self.forward_with_hook(ids, None)
    }

    pub fn forward_with_hook(&self, ids: &[TokenId], hook: Option<&dyn AlphaHook<T>>) -> Result<BackpackOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let tr = self.trace(&mut tape, &vars, ids, false, hook)?;
        let (n, k, d) = (ids.len(), self.config.num_senses, self.config.embed_dim);
        Ok(BackpackOutput {
            logits: tape.value(tr.logits).clone(),
            alpha: collect_alpha(&tape, &tr.alpha)?,
            senses: tape.value(tr.senses).clone().reshape(&[n, k, d])?,
        })
    }

    /// Context-free sense vectors, `[len, k, d]`.
    pub fn compute_senses(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                index: bad as usize,
                bound: self.config.vocab_size,
            });
        }
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let s = self.senses_on_tape(&mut tape, &vars, &to_usize(ids))?;
        let (k, d) = (self.config.num_senses, self.config.embed_dim);
        tape.value(s).clone().reshape(&[ids.len(), k, d])
    }

    /// Contextualization backbone output `h`, `[n, d]`.
    pub fn backbone_forward(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        self.config.check_ids(ids)?;
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let h = self.backbone.forward(&mut tape, &vars, &self.config, &to_usize(ids), 0.0)?;
        Ok(tape.value(h).clone())
    }

    /// α from a backbone output `h` (`[n, d]`), without dropout.
    pub fn compute_alpha(&self, h: &Tensor<T>) -> Result<AlphaWeights<T>> {
        if h.rank() != 2 || h.shape()[1] != self.config.embed_dim {
            return Err(Error::Shape {
                op: "compute_alpha",
                lhs: h.shape().to_vec(),
                rhs: vec![self.config.embed_dim],
            });
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let hv = tape.constant(h.clone());
        let a = self.alpha_on_tape(&mut tape, &vars, hv, 0.0)?;
        collect_alpha(&tape, &a)
    }

    /// Sense vectors for every vocabulary item. Must be regenerated after
    /// any parameter update.
    pub fn sense_bank(&self) -> Result<SenseBank<T>> {
        let ids: Vec<TokenId> = (0..self.config.vocab_size as TokenId).collect();
        Ok(SenseBank {
            senses: self.compute_senses(&ids)?,
        })
    }

    /// `Eᵀ v` for a `d`-vector `v`.
    pub fn project(&self, v: &[T]) -> Vec<T> {
        let e = self.embedding();
        let (vs, d) = (e.shape()[0], e.shape()[1]);
        let mut out = vec![T::zero(); vs];
        kernels::matmul_nt(v, e.data(), &mut out, 1, d, vs);
        out
    }

    /// The vocabulary scores of one sense, `Eᵀ C(token)_sense`.
    pub fn sense_logits(&self, token: TokenId, sense: usize) -> Result<Vec<T>> {
        if sense >= self.config.num_senses {
            return Err(Error::Index {
                index: sense,
                bound: self.config.num_senses,
            });
        }
        let s = self.compute_senses(&[token])?;
        let d = self.config.embed_dim;
        Ok(self.project(&s.data()[sense * d..(sense + 1) * d]))
    }

    /// Per-(position, sense) contributions to the logits at `position`.
    pub fn decompose_logits(&self, ids: &[TokenId], position: usize) -> Result<Decomposition<T>> {
        self.decompose_with_hook(ids, position, None)
    }

    pub fn decompose_with_hook(
        &self,
        ids: &[TokenId],
        position: usize,
        hook: Option<&dyn AlphaHook<T>>,
    ) -> Result<Decomposition<T>> {
        if position >= ids.len() {
            return Err(Error::Index {
                index: position,
                bound: ids.len(),
            });
        }
        let out = self.forward_with_hook(ids, hook)?;
        Ok(self.decompose_output(&out, position))
    }

    /// Decompositions of every position from a single forward pass.
    pub fn decompose_all(&self, ids: &[TokenId], hook: Option<&dyn AlphaHook<T>>) -> Result<Vec<Decomposition<T>>> {
        let out = self.forward_with_hook(ids, hook)?;
        Ok((0..ids.len()).map(|i| self.decompose_output(&out, i)).collect())
    }

    pub(crate) fn decompose_output(&self, out: &BackpackOutput<T>, position: usize) -> Decomposition<T> {
        let (k, d) = (self.config.num_senses, self.config.embed_dim);
        let mut contributions = Vec::with_capacity((position + 1) * k);
        for j in 0..=position {
            for s in 0..k {
                let start = (j * k + s) * d;
                let proj = self.project(&out.senses.data()[start..start + d]);
                let weight = out.alpha.get(s, position, j);
                contributions.push(Contribution {
                    position: j,
                    sense: s,
                    weight,
                    values: proj.into_iter().map(|v| v * weight).collect(),
                });
            }
        }
        Decomposition {
            position,
            logits: out.logits.row(position).to_vec(),
            contributions,
        }
    }
}

pub(crate) fn collect_alpha<T: Scalar>(tape: &Tape<T>, alpha: &[Var]) -> Result<AlphaWeights<T>> {
    let n = tape.value(alpha[0]).shape()[0];
    let mut data = Vec::with_capacity(alpha.len() * n * n);
    for &a in alpha {
        data.extend_from_slice(tape.value(a).data());
    }
    AlphaWeights::new(Tensor::new(vec![alpha.len(), n, n], data)?)
}

impl<T: Scalar> LanguageModel<T> for Backpack<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        Ok(self.forward(ids)?.logits)
    }
}

impl<T: Scalar> Trainable<T> for Backpack<T> {
    const ARCHITECTURE: Architecture = Architecture::Backpack;

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
        let tr = self.trace(tape, vars, inputs, train, None)?;
        tape.cross_entropy(tr.logits, &to_usize(targets))
    }
}
