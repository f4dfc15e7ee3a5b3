use std::collections::BTreeMap;
use std::fmt;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{AlphaHook, AlphaWeights, Backpack, BackpackOutput, LanguageModel, TokenId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which sequence positions a rule touches.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Position(usize),
    /// Every position holding this character.
    Char(char),
    /// Every position holding this id.
    Id(TokenId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub target: Target,
    /// `None` targets every sense.
    pub sense: Option<usize>,
    pub multiplier: f64,
    /// Renormalization group: per (sense, row), the group's total α mass is
    /// restored to its value before the intervention.
    pub group: Option<String>,
}

/// A set of α rescaling rules.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionSpec {
    pub rules: Vec<Rule>,
}

impl fmt::Display for InterventionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            let pos = match &r.target {
                Target::Position(i) => i.to_string(),
                Target::Char(c) => c.to_string(),
                Target::Id(t) => format!("#{t}"),
            };
            let sense = r.sense.map_or("*".to_string(), |s| s.to_string());
            write!(f, "pos={pos} sense={sense} mul={}", r.multiplier)?;
            if let Some(g) = &r.group {
                write!(f, " group={g}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl InterventionSpec {
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        if let Some(r) = rules.iter().find(|r| !(r.multiplier >= 0.0 && r.multiplier.is_finite())) {
            return Err(Error::Intervention(format!("multiplier {} must be finite and >= 0", r.multiplier)));
        }
        Ok(Self { rules })
    }

    /// Parses one rule per line: `pos=<i|char|#id> sense=<ℓ|*> mul=<m> [group=<id>]`.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("# ") || line == "#" {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: n + 1, msg };
            let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{tok}`")))?;
                if !matches!(k, "pos" | "sense" | "mul" | "group") {
                    return Err(bad(format!("unknown key `{k}`")));
                }
                if fields.insert(k, v).is_some() {
                    return Err(bad(format!("duplicate key `{k}`")));
                }
            }
            let pos = fields.get("pos").ok_or_else(|| bad("missing pos".into()))?;
            let target = if let Ok(i) = pos.parse::<usize>() {
                Target::Position(i)
            } else if let Some(id) = pos.strip_prefix('#').and_then(|s| s.parse().ok()) {
                Target::Id(id)
            } else {
                let mut cs = pos.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Target::Char(c),
                    _ => return Err(bad(format!("pos `{pos}` is neither an index nor one character"))),
                }
            };
            let sense = match fields.get("sense").copied().unwrap_or("*") {
                "*" => None,
                s => Some(s.parse().map_err(|_| bad(format!("bad sense `{s}`")))?),
            };
            let mul = fields.get("mul").ok_or_else(|| bad("missing mul".into()))?;
            let multiplier: f64 = mul.parse().map_err(|_| bad(format!("bad multiplier `{mul}`")))?;
            if !(multiplier >= 0.0 && multiplier.is_finite()) {
                return Err(bad(format!("multiplier {multiplier} must be finite and >= 0")));
            }
            rules.push(Rule {
                target,
                sense,
                multiplier,
                group: fields.get("group").map(|g| g.to_string()),
            });
        }
        Ok(Self { rules })
    }

    /// Binds the rules to a concrete sequence.
    pub fn resolve(&self, ids: &[TokenId], vocab: Option<&Vocabulary>, num_senses: usize) -> Result<Resolved> {
        let n = ids.len();
        let mut mult = vec![1.0f64; num_senses * n];
        let mut group_of: Vec<Option<usize>> = vec![None; n];
        let mut group_names: Vec<String> = Vec::new();
        for r in &self.rules {
            let positions: Vec<usize> = match &r.target {
                Target::Position(i) if *i < n => vec![*i],
                Target::Position(i) => {
                    return Err(Error::Intervention(format!("position {i} outside a sequence of {n}")))
                }
                Target::Id(t) => (0..n).filter(|&j| ids[j] == *t).collect(),
                Target::Char(c) => {
                    let v = vocab.ok_or_else(|| {
                        Error::Intervention(format!("character target {c:?} needs a vocabulary"))
                    })?;
                    let t = v
                        .id(*c)
                        .ok_or_else(|| Error::Intervention(format!("character {c:?} not in vocabulary")))?;
                    (0..n).filter(|&j| ids[j] == t).collect()
                }
            };
            if positions.is_empty() {
                return Err(Error::Intervention(format!("rule {:?} matches no position", r.target)));
            }
            if let Some(s) = r.sense {
                if s >= num_senses {
                    return Err(Error::Index {
                        index: s,
                        bound: num_senses,
                    });
                }
            }
            let gid = r.group.as_ref().map(|g| match group_names.iter().position(|x| x == g) {
                Some(i) => i,
                None => {
                    group_names.push(g.clone());
                    group_names.len() - 1
                }
            });
            for &j in &positions {
                if let Some(g) = gid {
                    match group_of[j] {
                        Some(other) if other != g => {
                            return Err(Error::Intervention(format!(
                                "position {j} belongs to groups `{}` and `{}`",
                                group_names[other], group_names[g]
                            )))
                        }
                        _ => group_of[j] = Some(g),
                    }
                }
                let senses = match r.sense {
                    Some(s) => s..s + 1,
                    None => 0..num_senses,
                };
                for s in senses {
                    mult[s * n + j] *= r.multiplier;
                }
            }
        }
        Ok(Resolved {
            n,
            num_senses,
            mult,
            group_of,
            num_groups: group_names.len(),
            skipped: std::cell::Cell::new(0),
        })
    }
}

/// Rules bound to a sequence: a per-(sense, position) multiplier and group
/// membership. Applies as an [`AlphaHook`].
#[derive(Clone, Debug)]
pub struct Resolved {
    n: usize,
    num_senses: usize,
    mult: Vec<f64>,
    group_of: Vec<Option<usize>>,
    num_groups: usize,
    skipped: std::cell::Cell<usize>,
}

impl Resolved {
    pub fn multiplier(&self, sense: usize, position: usize) -> f64 {
        self.mult[sense * self.n + position]
    }

    /// Rows left untouched by the last application because a group had no
    /// mass on them to begin with, counting only rows at or after the
    /// group's first position.
    pub fn skipped_rows(&self) -> usize {
        self.skipped.get()
    }
}

impl<T: Scalar> AlphaHook<T> for Resolved {
    fn multipliers(&self, alpha: &AlphaWeights<T>) -> Result<Option<Tensor<T>>> {
        let (k, n) = (alpha.num_senses(), alpha.len());
        if k != self.num_senses || n != self.n {
            return Err(Error::Intervention(format!(
                "intervention resolved for {} senses x {} positions, α is {k} x {n}",
                self.num_senses, self.n
            )));
        }
        let mut out = vec![T::one(); k * n * n];
        let mut skipped = 0;
        let first_member: Vec<Option<usize>> = (0..self.num_groups)
            .map(|g| self.group_of.iter().position(|&x| x == Some(g)))
            .collect();
        for l in 0..k {
            for i in 0..n {
                let row = alpha.row(l, i);
                let base = (l * n + i) * n;
                for j in 0..n {
                    out[base + j] = T::of(self.mult[l * n + j]);
                }
                for g in 0..self.num_groups {
                    let members = || (0..n).filter(move |&j| self.group_of[j] == Some(g));
                    let before: f64 = members().map(|j| row[j].as_f64()).sum();
                    let after: f64 = members().map(|j| row[j].as_f64() * self.mult[l * n + j]).sum();
                    if before == 0.0 {
                        if first_member[g].is_some_and(|f| i >= f) {
                            skipped += 1;
                        }
                        continue;
                    }
                    if after == 0.0 {
                        return Err(Error::Intervention(format!(
                            "group mass vanishes at sense {l}, row {i}; cannot renormalize"
                        )));
                    }
                    let scale = before / after;
                    for j in members() {
                        out[base + j] = T::of(self.mult[l * n + j] * scale);
                    }
                }
            }
        }
        self.skipped.set(skipped);
        Ok(Some(Tensor::new(vec![k, n, n], out)?))
    }
}

/// Backpack forward pass with α rescaled by `spec`.
pub fn forward_with_intervention<T: Scalar>(
    model: &Backpack<T>,
    ids: &[TokenId],
    spec: &InterventionSpec,
    vocab: Option<&Vocabulary>,
) -> Result<BackpackOutput<T>> {
    let resolved = spec.resolve(ids, vocab, model.config().num_senses)?;
    model.forward_with_hook(ids, Some(&resolved))
}
