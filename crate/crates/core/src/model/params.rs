use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Which part of a parameter receives decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Off,
    On,
    /// Decay every row except the first `n` (reserved-token embeddings).
    SkipRows(usize),
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub decay: Decay,
}

/// Ordered, named parameter table. Order is construction order and is the
/// order used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: Decay) -> usize {
        self.params.push(Param {
            name: name.into(),
            tensor,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Replaces tensor values from `other`, which must have identical names
    /// and shapes in the same order. The error names the first mismatch.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        for i in 0..self.params.len().max(other.len()) {
            match (self.params.get(i), other.get(i)) {
                (Some(p), Some((name, t))) if &p.name == name && p.tensor.shape() == t.shape() => {}
                (Some(p), found) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}` {:?} does not match checkpoint ({})",
                        p.name,
                        p.tensor.shape(),
                        found.map_or("missing".to_string(), |(n, t)| format!("`{n}` {:?}", t.shape()))
                    )))
                }
                (None, Some((name, _))) => {
                    return Err(Error::Checkpoint(format!("unexpected tensor `{name}` in checkpoint")))
                }
                (None, None) => unreachable!(),
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(other) {
            p.tensor = t.clone();
        }
        Ok(())
    }
}

/// GPT-2 style initializer: N(0, 0.02) weights, zero biases, unit gains.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: 0.02,
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::of(dist.sample(&mut self.rng)))
    }

    pub fn weight<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let std = self.std;
        self.normal(shape, std)
    }
}
