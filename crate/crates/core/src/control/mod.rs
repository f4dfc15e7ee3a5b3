//! Sense inspection and α-level interventions.

mod generate;
mod intervention;

pub use generate::{generate, GenerateSettings, Generation, GenerationStep};
pub use intervention::{forward_with_intervention, InterventionSpec, Resolved, Rule, Target};

use std::io::Write;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::PromptTemplate;
use crate::model::{Backpack, LanguageModel, TokenId};
use crate::scalar::Scalar;
use crate::tensor::kernels::log_softmax_row;
use crate::tensor::Tensor;

/// Indices of the `topk` largest scores, ties broken by lower index.
pub fn rank_desc(scores: &[f64], topk: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(topk).map(|i| (i, scores[i])).collect()
}

/// Highest-scoring vocabulary items of `Eᵀ C(token)_sense`.
pub fn sense_projection_topk<T: Scalar>(
    model: &Backpack<T>,
    token: TokenId,
    sense: usize,
    topk: usize,
) -> Result<Vec<(TokenId, f64)>> {
    let scores: Vec<f64> = model.sense_logits(token, sense)?.iter().map(|v| v.as_f64()).collect();
    Ok(rank_desc(&scores, topk)
        .into_iter()
        .map(|(t, s)| (t as TokenId, s))
        .collect())
}

/// Senses ordered by `‖Eᵀ(C(he)_ℓ − C(she)_ℓ)‖₂`, largest first.
pub fn bias_sense_ranking<T: Scalar>(model: &Backpack<T>, he: TokenId, she: TokenId) -> Result<Vec<(usize, f64)>> {
    let k = model.config().num_senses;
    let mut scores = Vec::with_capacity(k);
    for l in 0..k {
        let a = model.sense_logits(he, l)?;
        let b = model.sense_logits(she, l)?;
        scores.push(
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt(),
        );
    }
    Ok(rank_desc(&scores, k))
}

/// Senses ordered by how differently the given characters' own senses score
/// he and she, `Σ_x |(Eᵀ C(x)_ℓ)[he] − (Eᵀ C(x)_ℓ)[she]|`, largest first.
pub fn token_bias_ranking<T: Scalar>(
    model: &Backpack<T>,
    tokens: &[TokenId],
    he: TokenId,
    she: TokenId,
) -> Result<Vec<(usize, f64)>> {
    if tokens.is_empty() {
        return Err(Error::Intervention("no tokens to rank senses over".into()));
    }
    let k = model.config().num_senses;
    let mut scores = vec![0.0; k];
    for &t in tokens {
        for (l, score) in scores.iter_mut().enumerate() {
            let s = model.sense_logits(t, l)?;
            *score += (s[he as usize].as_f64() - s[she as usize].as_f64()).abs();
        }
    }
    Ok(rank_desc(&scores, k))
}

/// Pronoun pair for bias measurements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pronouns {
    pub he: TokenId,
    pub she: TokenId,
}

impl Pronouns {
    pub fn from_chars(vocab: &Vocabulary, he: char, she: char) -> Result<Self> {
        let get = |c: char| {
            vocab
                .id(c)
                .ok_or_else(|| Error::Intervention(format!("pronoun {c:?} not in vocabulary")))
        };
        Ok(Self {
            he: get(he)?,
            she: get(she)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub word: String,
    pub prompts: Vec<String>,
    /// `max(p(he)/p(she), p(she)/p(he))` per prompt.
    pub before: Vec<f64>,
    pub after: Option<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl BiasReport {
    pub fn mean_before(&self) -> f64 {
        mean(&self.before)
    }

    pub fn mean_after(&self) -> Option<f64> {
        self.after.as_deref().map(mean)
    }

    pub fn write_csv(reports: &[BiasReport], mut w: impl Write) -> Result<()> {
        writeln!(w, "word,before,after")?;
        for r in reports {
            let after = r.mean_after().map_or(String::new(), |a| format!("{a:.6}"));
            writeln!(w, "{},{:.6},{after}", r.word, r.mean_before())?;
        }
        Ok(())
    }
}

/// Bias ratio of the next-token distribution after each filled prompt.
pub fn prompt_bias_ratios<T: Scalar>(
    model: &Backpack<T>,
    vocab: &Vocabulary,
    word: &str,
    prompts: &[PromptTemplate],
    pronouns: Pronouns,
    spec: Option<&InterventionSpec>,
) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::Eval("no prompts".into()));
    }
    let v = model.config().vocab_size;
    for t in [pronouns.he, pronouns.she] {
        if t as usize >= v {
            return Err(Error::Index {
                index: t as usize,
                bound: v,
            });
        }
    }
    prompts
        .iter()
        .map(|p| {
            let (ids, _) = p.encode(vocab, word)?;
            let out = match spec {
                Some(s) => forward_with_intervention(model, &ids, s, Some(vocab))?,
                None => model.forward(&ids)?,
            };
            let lp = log_softmax_row(out.logits.row(ids.len() - 1));
            let r = lp[pronouns.he as usize] - lp[pronouns.she as usize];
            Ok(r.abs().exp())
        })
        .collect()
}

/// Mean bias ratio over prompts, optionally under an intervention.
pub fn bias_score<T: Scalar>(
    model: &Backpack<T>,
    vocab: &Vocabulary,
    word: &str,
    prompts: &[PromptTemplate],
    pronouns: Pronouns,
    spec: Option<&InterventionSpec>,
) -> Result<f64> {
    Ok(mean(&prompt_bias_ratios(model, vocab, word, prompts, pronouns, spec)?))
}

pub fn bias_report<T: Scalar>(
    model: &Backpack<T>,
    vocab: &Vocabulary,
    word: &str,
    prompts: &[PromptTemplate],
    pronouns: Pronouns,
    spec: Option<&InterventionSpec>,
) -> Result<BiasReport> {
    let before = prompt_bias_ratios(model, vocab, word, prompts, pronouns, None)?;
    let after = spec
        .map(|s| prompt_bias_ratios(model, vocab, word, prompts, pronouns, Some(s)))
        .transpose()?;
    Ok(BiasReport {
        word: word.into(),
        prompts: prompts.iter().map(|p| p.text.clone()).collect(),
        before,
        after,
    })
}

/// Reads either the `remove:<sense>` shorthand (zero that sense on every
/// character of `word`) or a full rule document.
pub fn bias_spec(text: &str, vocab: &Vocabulary, word: &str) -> Result<InterventionSpec> {
    match text.trim().strip_prefix("remove:") {
        Some(s) => {
            let sense = s
                .trim()
                .parse()
                .map_err(|_| Error::Intervention(format!("bad sense in `{}`", text.trim())))?;
            remove_sense_spec(vocab, word, sense)
        }
        None => InterventionSpec::parse(text),
    }
}

/// Zeroes `sense` on every character of `word`.
pub fn remove_sense_spec(vocab: &Vocabulary, word: &str, sense: usize) -> Result<InterventionSpec> {
    let mut rules = Vec::new();
    for c in word.chars() {
        if vocab.id(c).is_none() {
            return Err(Error::Intervention(format!("character {c:?} not in vocabulary")));
        }
        if !rules.iter().any(|r: &Rule| r.target == Target::Char(c)) {
            rules.push(Rule {
                target: Target::Char(c),
                sense: Some(sense),
                multiplier: 0.0,
                group: None,
            });
        }
    }
    InterventionSpec::new(rules)
}

/// Embedding table with each listed row projected onto the orthogonal
/// complement of `E[he] − E[she]`.
pub fn nullspace_debias<T: Scalar>(
    table: &Tensor<T>,
    biased: &[TokenId],
    pronouns: Pronouns,
) -> Result<Tensor<T>> {
    let (v, d) = (table.shape()[0], table.shape()[1]);
    for &t in biased.iter().chain([&pronouns.he, &pronouns.she]) {
        if t as usize >= v {
            return Err(Error::Index {
                index: t as usize,
                bound: v,
            });
        }
    }
    let dir: Vec<f64> = table
        .row(pronouns.he as usize)
        .iter()
        .zip(table.row(pronouns.she as usize))
        .map(|(a, b)| a.as_f64() - b.as_f64())
        .collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Intervention("bias direction is zero".into()));
    }
    let u: Vec<f64> = dir.iter().map(|x| x / norm).collect();
    let mut out = table.clone();
    for &t in biased {
        let row = out.row_mut(t as usize);
        let dot: f64 = row.iter().zip(&u).map(|(a, b)| a.as_f64() * b).sum();
        for c in 0..d {
            row[c] = T::of(row[c].as_f64() - dot * u[c]);
        }
    }
    Ok(out)
}

/// Model whose embedding rows for `biased` are debiased as above.
pub fn nullspace_debiased_model<T: Scalar>(
    model: &Backpack<T>,
    biased: &[TokenId],
    pronouns: Pronouns,
) -> Result<Backpack<T>> {
    let mut m = model.clone();
    m.set_embedding(nullspace_debias(model.embedding(), biased, pronouns)?)?;
    Ok(m)
}

/// Rules scaling each position of `span` by its multiplier, renormalized
/// so the span's α mass per (sense, row) is preserved.
pub fn span_spec(start: usize, multipliers: &[f64]) -> Result<InterventionSpec> {
    InterventionSpec::new(
        multipliers
            .iter()
            .enumerate()
            .map(|(s, &m)| Rule {
                target: Target::Position(start + s),
                sense: None,
                multiplier: m,
                group: Some("span".into()),
            })
            .collect(),
    )
}

#[derive(Clone, Debug)]
pub struct Amplified<T> {
    pub logits: Tensor<T>,
    /// Rows at or after the span start where the span held no α mass.
    pub skipped_rows: usize,
}

/// Scales α of `span_start + char_index` by `multiplier` and renormalizes
/// over the span.
pub fn amplify_character<T: Scalar>(
    model: &Backpack<T>,
    ids: &[TokenId],
    span_start: usize,
    span_len: usize,
    char_index: usize,
    multiplier: f64,
) -> Result<Amplified<T>> {
    if span_len == 0 || span_start + span_len > ids.len() || char_index >= span_len {
        return Err(Error::Intervention(format!(
            "span {span_start}+{span_len} / char {char_index} invalid for {} tokens",
            ids.len()
        )));
    }
    let mut mults = vec![1.0; span_len];
    mults[char_index] = multiplier;
    let spec = span_spec(span_start, &mults)?;
    let resolved = spec.resolve(ids, None, model.config().num_senses)?;
    let out = model.forward_with_hook(ids, Some(&resolved))?;
    Ok(Amplified {
        logits: out.logits,
        skipped_rows: resolved.skipped_rows(),
    })
}

/// `p(probe | amplified) / p(probe | original)` at the last position, with
/// one multiplier per span character.
pub fn amplification_ratio_eval<T: Scalar>(
    model: &Backpack<T>,
    ids: &[TokenId],
    span_start: usize,
    multipliers: &[f64],
    probes: &[TokenId],
) -> Result<Vec<f64>> {
    if multipliers.is_empty() || span_start + multipliers.len() > ids.len() {
        return Err(Error::Intervention("span outside the prompt".into()));
    }
    let base = model.forward(ids)?;
    let spec = span_spec(span_start, multipliers)?;
    let amp = forward_with_intervention(model, ids, &spec, None)?;
    let last = ids.len() - 1;
    let lp0 = log_softmax_row(base.logits.row(last));
    let lp1 = log_softmax_row(amp.logits.row(last));
    probes
        .iter()
        .map(|&p| {
            let p = p as usize;
            if p >= lp0.len() {
                return Err(Error::Index {
                    index: p,
                    bound: lp0.len(),
                });
            }
            Ok((lp1[p] - lp0[p]).exp())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SenseProbe {
    /// `None` for the full sum over senses.
    pub sense: Option<usize>,
    pub logits: Vec<f64>,
    /// 0-based rank of the target, ties broken by id.
    pub target_rank: usize,
    pub top: TokenId,
}

fn probe(sense: Option<usize>, logits: Vec<f64>, target: TokenId) -> SenseProbe {
    let ranked = rank_desc(&logits, logits.len());
    let target_rank = ranked.iter().position(|&(t, _)| t == target as usize).expect("target in range");
    SenseProbe {
        sense,
        top: ranked[0].0 as TokenId,
        target_rank,
        logits,
    }
}

/// Next-token logits after `prefix` computed from one sense at a time, plus
/// the full sum.
pub fn idiom_single_sense_probe<T: Scalar>(
    model: &Backpack<T>,
    prefix: &[TokenId],
    target: TokenId,
) -> Result<Vec<SenseProbe>> {
    let v = model.config().vocab_size;
    if target as usize >= v {
        return Err(Error::Index {
            index: target as usize,
            bound: v,
        });
    }
    if prefix.is_empty() {
        return Err(Error::Contract("empty prefix".into()));
    }
    let dec = model.decompose_logits(prefix, prefix.len() - 1)?;
    let k = model.config().num_senses;
    let mut per = vec![vec![0.0f64; v]; k];
    for c in &dec.contributions {
        for (a, x) in per[c.sense].iter_mut().zip(&c.values) {
            *a += x.as_f64();
        }
    }
    let mut out: Vec<SenseProbe> = per
        .into_iter()
        .enumerate()
        .map(|(l, logits)| probe(Some(l), logits, target))
        .collect();
    out.push(probe(None, dec.logits.iter().map(|x| x.as_f64()).collect(), target));
    Ok(out)
}
