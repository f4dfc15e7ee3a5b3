use std::io::Write;

use crate::corpus::{Vocabulary, WordKind, BOS};
use crate::error::{Error, Result};
use crate::model::{Backpack, SenseBank, TokenId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ids of every character in `word`; unknown characters are an error.
pub fn word_ids(vocab: &Vocabulary, word: &str) -> Result<Vec<TokenId>> {
    if word.is_empty() {
        return Err(Error::Eval("empty word".into()));
    }
    vocab.encode_strict(word).map_err(|e| Error::Eval(format!("`{word}`: {e}")))
}

/// Per-sense mean of the constituent characters' sense vectors, `[k, d]`.
pub fn word_vec_average<T: Scalar>(bank: &SenseBank<T>, word: &[TokenId]) -> Result<Tensor<T>> {
    if word.is_empty() {
        return Err(Error::Eval("empty word".into()));
    }
    let (k, d) = (bank.num_senses(), bank.dim());
    let mut acc = vec![0.0f64; k * d];
    for &t in word {
        if t as usize >= bank.vocab_size() {
            return Err(Error::Index {
                index: t as usize,
                bound: bank.vocab_size(),
            });
        }
        for l in 0..k {
            for (a, v) in acc[l * d..(l + 1) * d].iter_mut().zip(bank.sense(t, l)) {
                *a += v.as_f64();
            }
        }
    }
    let n = word.len() as f64;
    Tensor::new(vec![k, d], acc.into_iter().map(|a| T::of(a / n)).collect())
}

/// Per-sense share of each constituent of the word at
/// `context[start..start + len]`, averaged over every later position.
/// Returns `[k][len]`; each row sums to one.
pub fn composition_ratio<T: Scalar>(
    model: &Backpack<T>,
    context: &[TokenId],
    start: usize,
    len: usize,
) -> Result<Vec<Vec<f64>>> {
    if len == 0 || start + len > context.len() {
        return Err(Error::Eval(format!(
            "word span {start}..{} outside a context of {}",
            start + len,
            context.len()
        )));
    }
    let last = start + len - 1;
    if last + 1 >= context.len() {
        return Err(Error::Eval("word ends the context; no later positions to average".into()));
    }
    let alpha = model.forward(context)?.alpha;
    let rows = context.len() - last - 1;
    let mut out = Vec::with_capacity(alpha.num_senses());
    for l in 0..alpha.num_senses() {
        let mut lam = vec![0.0f64; len];
        for i in last + 1..context.len() {
            let row = alpha.row(l, i);
            let z: f64 = row[start..=last].iter().map(|a| a.as_f64()).sum();
            if z > 0.0 {
                for (s, lv) in lam.iter_mut().enumerate() {
                    *lv += row[start + s].as_f64() / z;
                }
            } else {
                lam.iter_mut().for_each(|lv| *lv += 1.0 / len as f64);
            }
        }
        lam.iter_mut().for_each(|v| *v /= rows as f64);
        let z: f64 = lam.iter().sum();
        lam.iter_mut().for_each(|v| *v /= z);
        out.push(lam);
    }
    Ok(out)
}

/// `C(w)_ℓ = mean over contexts of Σ_s λ_ℓs · C(x_s)_ℓ`, `[k, d]`.
/// Each context is `(ids, start)` with the word at `ids[start..start + word.len()]`.
pub fn compose_word_sense<T: Scalar>(
    model: &Backpack<T>,
    bank: &SenseBank<T>,
    word: &[TokenId],
    contexts: &[(Vec<TokenId>, usize)],
) -> Result<Tensor<T>> {
    if contexts.is_empty() {
        return Err(Error::Eval("at least one context is required".into()));
    }
    let (k, d) = (bank.num_senses(), bank.dim());
    let mut acc = vec![0.0f64; k * d];
    for (ids, start) in contexts {
        if ids.get(*start..start + word.len()) != Some(word) {
            return Err(Error::Eval(format!("context does not hold the word at {start}")));
        }
        let ratios = composition_ratio(model, ids, *start, word.len())?;
        for (l, lam) in ratios.iter().enumerate() {
            for (s, &t) in word.iter().enumerate() {
                for (a, v) in acc[l * d..(l + 1) * d].iter_mut().zip(bank.sense(t, l)) {
                    *a += lam[s] * v.as_f64();
                }
            }
        }
    }
    let q = contexts.len() as f64;
    Tensor::new(vec![k, d], acc.into_iter().map(|a| T::of(a / q)).collect())
}

pub const WORD_SLOT: &str = "[WORD]";

/// A prompt with one `[WORD]` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        match text.matches(WORD_SLOT).count() {
            1 => Ok(Self { text }),
            n => Err(Error::Eval(format!("prompt `{text}` has {n} {WORD_SLOT} slots, expected 1"))),
        }
    }

    /// Reads one template per non-empty line.
    pub fn parse_lines(text: &str) -> Result<Vec<Self>> {
        text.lines().filter(|l| !l.trim().is_empty()).map(Self::new).collect()
    }

    /// Filled text and the character offset of the word.
    pub fn fill(&self, word: &str) -> (String, usize) {
        let at = self.text.find(WORD_SLOT).expect("validated slot");
        let offset = self.text[..at].chars().count();
        (self.text.replacen(WORD_SLOT, word, 1), offset)
    }

    /// BOS-prefixed ids and the id offset of the word.
    pub fn encode(&self, vocab: &Vocabulary, word: &str) -> Result<(Vec<TokenId>, usize)> {
        let (text, offset) = self.fill(word);
        let mut ids = vec![BOS];
        ids.extend(vocab.encode_strict(&text)?);
        Ok((ids, offset + 1))
    }
}

pub const BUCKET_LABELS: [&str; 3] = ["<=10%", "<=20%", ">20%"];

fn bucket(dev: f64) -> usize {
    if dev <= 0.10 {
        0
    } else if dev <= 0.20 {
        1
    } else {
        2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordStability {
    pub word: String,
    pub kind: WordKind,
    /// Per sense: mean constituent ratios across contexts.
    pub mean_ratios: Vec<Vec<f64>>,
    /// Per sense: largest deviation of any constituent ratio from its mean.
    pub deviations: Vec<f64>,
    pub buckets: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub words: Vec<WordStability>,
}

/// Max absolute deviation of any constituent ratio from its cross-context
/// mean, per sense. `ratios` is `[context][sense][constituent]`.
pub fn ratio_deviations(ratios: &[Vec<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let q = ratios.len() as f64;
    let k = ratios[0].len();
    let p = ratios[0][0].len();
    let mut means = vec![vec![0.0; p]; k];
    for r in ratios {
        for l in 0..k {
            for s in 0..p {
                means[l][s] += r[l][s] / q;
            }
        }
    }
    let means_ref = &means;
    let devs = (0..k)
        .map(|l| {
            ratios
                .iter()
                .flat_map(|r| (0..p).map(move |s| (r[l][s] - means_ref[l][s]).abs()))
                .fold(0.0, f64::max)
        })
        .collect();
    (means, devs)
}

/// Stability of constituent ratios of each word across the prompts.
pub fn stability_report<T: Scalar>(
    model: &Backpack<T>,
    vocab: &Vocabulary,
    words: &[(String, WordKind)],
    prompts: &[PromptTemplate],
) -> Result<StabilityReport> {
    if prompts.len() < 2 {
        return Err(Error::Eval("stability needs at least two contexts per word".into()));
    }
    let mut out = Vec::with_capacity(words.len());
    for (word, kind) in words {
        let len = word_ids(vocab, word)?.len();
        let mut ratios = Vec::with_capacity(prompts.len());
        for p in prompts {
            let (ids, start) = p.encode(vocab, word)?;
            ratios.push(composition_ratio(model, &ids, start, len)?);
        }
        let (mean_ratios, deviations) = ratio_deviations(&ratios);
        let mut buckets = [0; 3];
        for &d in &deviations {
            buckets[bucket(d)] += 1;
        }
        out.push(WordStability {
            word: word.clone(),
            kind: *kind,
            mean_ratios,
            deviations,
            buckets,
        });
    }
    Ok(StabilityReport { words: out })
}

impl StabilityReport {
    /// Fractions of (word, sense) pairs per bucket for one word type.
    pub fn fractions(&self, kind: WordKind) -> Option<[f64; 3]> {
        let mut counts = [0usize; 3];
        for w in self.words.iter().filter(|w| w.kind == kind) {
            for b in 0..3 {
                counts[b] += w.buckets[b];
            }
        }
        let n: usize = counts.iter().sum();
        (n > 0).then(|| counts.map(|c| c as f64 / n as f64))
    }

    /// One row per word type with percentages per bucket.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "type,{}", BUCKET_LABELS.join(","))?;
        for kind in WordKind::ALL {
            if let Some(f) = self.fractions(kind) {
                writeln!(w, "{kind},{:.2}%,{:.2}%,{:.2}%", f[0] * 100.0, f[1] * 100.0, f[2] * 100.0)?;
            }
        }
        Ok(())
    }

    pub fn write_word_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "word,type,sense,deviation,bucket")?;
        for ws in &self.words {
            for (l, d) in ws.deviations.iter().enumerate() {
                writeln!(w, "{},{},{l},{d:.6},{}", ws.word, ws.kind, BUCKET_LABELS[bucket(*d)])?;
            }
        }
        Ok(())
    }
}
