use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::AdamState;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, Trainable};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BKPK";
const VERSION: u32 = 1;
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

/// Model weights plus flat `key=value` metadata. Payloads are `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Digest of the shape-defining fields of a configuration.
pub fn config_hash(cfg: &ModelConfig, arch: Architecture) -> String {
    let canon = format!(
        "arch={arch};vocab_size={};embed_dim={};num_senses={};layers={};heads={};context_length={}",
        cfg.vocab_size, cfg.embed_dim, cfg.num_senses, cfg.layers, cfg.heads, cfg.context_length
    );
    hex::encode(Sha256::digest(canon.as_bytes()))
}

impl Checkpoint {
    pub fn from_model<T: Scalar, M: Trainable<T>>(model: &M) -> Self {
        let cfg = model.config();
        let arch = model.architecture();
        let mut metadata = BTreeMap::new();
        for (k, v) in [
            ("arch", arch.to_string()),
            ("vocab_size", cfg.vocab_size.to_string()),
            ("embed_dim", cfg.embed_dim.to_string()),
            ("num_senses", cfg.num_senses.to_string()),
            ("layers", cfg.layers.to_string()),
            ("heads", cfg.heads.to_string()),
            ("context_length", cfg.context_length.to_string()),
            ("dropout", cfg.dropout.to_string()),
            ("config_hash", config_hash(cfg, arch)),
        ] {
            metadata.insert(k.to_string(), v);
        }
        let tensors = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.cast()))
            .collect();
        Self { metadata, tensors }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn with_vocab(self, vocab: &Vocabulary) -> Self {
        let chars: String = vocab.chars().iter().collect();
        self.with_meta("vocab_hex", hex::encode(chars.as_bytes()))
    }

    pub fn vocab(&self) -> Result<Option<Vocabulary>> {
        let Some(h) = self.metadata.get("vocab_hex") else {
            return Ok(None);
        };
        let bytes = hex::decode(h).map_err(|e| Error::Checkpoint(format!("vocab_hex: {e}")))?;
        let s = String::from_utf8(bytes).map_err(|e| Error::Checkpoint(format!("vocab_hex: {e}")))?;
        Ok(Some(Vocabulary::from_chars(s.chars())))
    }

    /// Stores optimizer moments as `opt.m.<name>` / `opt.v.<name>`.
    pub fn with_optimizer<T: Scalar>(mut self, state: &AdamState<T>) -> Self {
        let model: Vec<(String, Vec<usize>)> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("opt."))
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for (prefix, bufs) in [(OPT_M, &state.m), (OPT_V, &state.v)] {
            for ((name, shape), buf) in model.iter().zip(bufs) {
                let data = buf.iter().map(|x| x.as_f64() as f32).collect();
                let t = Tensor::new(shape.clone(), data).expect("moment shaped like its parameter");
                self.tensors.push((format!("{prefix}{name}"), t));
            }
        }
        self.metadata.insert("opt_step".into(), state.step.to_string());
        self
    }

    fn get_meta<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata key `{key}` missing")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` has bad value `{raw}`")))
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.get_meta::<String>("arch")?.parse()
    }

    pub fn config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vocab_size: self.get_meta("vocab_size")?,
            embed_dim: self.get_meta("embed_dim")?,
            num_senses: self.get_meta("num_senses")?,
            layers: self.get_meta("layers")?,
            heads: self.get_meta("heads")?,
            context_length: self.get_meta("context_length")?,
            dropout: self.get_meta("dropout")?,
        })
    }

    pub fn step(&self) -> Option<usize> {
        self.get_meta("step").ok()
    }

    fn model_tensors<T: Scalar>(&self) -> Vec<(String, Tensor<T>)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(OPT_M) && !n.starts_with(OPT_V))
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect()
    }

    /// Copies weights into `model`. The error names the first tensor whose
    /// name or shape differs.
    pub fn load_into<T: Scalar, M: Trainable<T>>(&self, model: &mut M) -> Result<()> {
        let arch = self.architecture()?;
        if arch != model.architecture() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {arch} model, target is {}",
                model.architecture()
            )));
        }
        model.params_mut().load_from(&self.model_tensors())?;
        let want: String = self.get_meta("config_hash")?;
        if want != config_hash(model.config(), arch) {
            return Err(Error::Checkpoint("configuration hash mismatch".into()));
        }
        Ok(())
    }

    /// Builds a model from the stored configuration and loads its weights.
    pub fn restore<T: Scalar, M: Trainable<T>>(&self) -> Result<M> {
        let mut model = M::from_config(self.config()?, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn optimizer_state<T: Scalar, M: Trainable<T>>(&self, model: &M) -> Result<Option<AdamState<T>>> {
        let Ok(step) = self.get_meta::<u64>("opt_step") else {
            return Ok(None);
        };
        let lookup = |prefix: &str| -> Result<Vec<Vec<T>>> {
            model
                .params()
                .iter()
                .map(|p| {
                    let key = format!("{prefix}{}", p.name);
                    let (_, t) = self
                        .tensors
                        .iter()
                        .find(|(n, _)| *n == key)
                        .ok_or_else(|| Error::Checkpoint(format!("tensor `{key}` missing")))?;
                    if t.shape() != p.tensor.shape() {
                        return Err(Error::Checkpoint(format!("tensor `{key}` has shape {:?}", t.shape())));
                    }
                    Ok(t.data().iter().map(|&x| T::of(x as f64)).collect())
                })
                .collect()
        };
        Ok(Some(AdamState {
            step,
            m: lookup(OPT_M)?,
            v: lookup(OPT_V)?,
        }))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry `{k}` cannot be encoded")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let truncated = |what: &str| Error::Checkpoint(format!("checkpoint truncated in {what}"));
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| truncated("header"))?;
        if &head[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if rest.len() < meta_len {
            return Err(truncated("metadata"));
        }
        let meta = std::str::from_utf8(&rest[..meta_len])
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let mut cur = Cursor {
            buf: &rest[meta_len..],
        };
        let mut tensors = Vec::new();
        while !cur.buf.is_empty() {
            let n = cur.u32().ok_or_else(|| truncated("tensor name"))? as usize;
            let name = cur.take(n).ok_or_else(|| truncated("tensor name"))?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = cur.u32().ok_or_else(|| truncated(&name))? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| truncated(&name))?;
            let count: usize = shape.iter().product();
            let bytes = cur.take(count * 4).ok_or_else(|| truncated(&name))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Some(a)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
