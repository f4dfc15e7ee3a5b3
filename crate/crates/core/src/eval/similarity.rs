use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WordPair {
    pub a: String,
    pub b: String,
    pub score: f64,
}

/// Reads `wordA\twordB\tscore` lines.
pub fn read_word_pairs(r: impl BufRead) -> Result<Vec<WordPair>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: n + 1, msg };
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", parts.len())));
        }
        let score = parts[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad score `{}`", parts[2])))?;
        out.push(WordPair {
            a: parts[0].into(),
            b: parts[1].into(),
            score,
        });
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Pearson correlation; `None` when either side is constant or `n < 2`.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

impl Correlation {
    pub fn of(x: &[f64], y: &[f64]) -> Self {
        Self {
            spearman: spearman(x, y),
            pearson: pearson(x, y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// Per pair: cosine for each sense index, then for the sense average.
    pub cosines: Vec<(Vec<f64>, f64)>,
    pub per_sense: Vec<Correlation>,
    pub averaged: Correlation,
    /// Sense index with the highest Spearman coefficient.
    pub best_sense: Option<usize>,
}

/// Correlates human scores with cosine similarities of `[k, d]` word
/// representations, per sense index and for the mean over senses.
pub fn lexical_similarity<T: Scalar>(
    pairs: &[WordPair],
    mut repr: impl FnMut(&str) -> Result<Tensor<T>>,
) -> Result<SimilarityReport> {
    if pairs.len() < 3 {
        return Err(Error::Eval(format!("need at least 3 word pairs, got {}", pairs.len())));
    }
    let human: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    if human.iter().all(|&h| h == human[0]) {
        return Err(Error::Eval("human scores are all equal".into()));
    }
    let mut cosines = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (ra, rb) = (repr(&p.a)?, repr(&p.b)?);
        if ra.shape() != rb.shape() || ra.rank() != 2 {
            return Err(Error::Eval("representations must share a [k, d] shape".into()));
        }
        let (k, d) = (ra.shape()[0], ra.shape()[1]);
        let fa: Vec<f64> = ra.data().iter().map(|v| v.as_f64()).collect();
        let fb: Vec<f64> = rb.data().iter().map(|v| v.as_f64()).collect();
        let per: Vec<f64> = (0..k)
            .map(|l| cosine(&fa[l * d..(l + 1) * d], &fb[l * d..(l + 1) * d]))
            .collect();
        let mean = |f: &[f64]| -> Vec<f64> { (0..d).map(|c| (0..k).map(|l| f[l * d + c]).sum::<f64>() / k as f64).collect() };
        cosines.push((per, cosine(&mean(&fa), &mean(&fb))));
    }
    let k = cosines[0].0.len();
    let per_sense: Vec<Correlation> = (0..k)
        .map(|l| {
            let c: Vec<f64> = cosines.iter().map(|(p, _)| p[l]).collect();
            Correlation::of(&c, &human)
        })
        .collect();
    let avg: Vec<f64> = cosines.iter().map(|(_, a)| *a).collect();
    let best_sense = per_sense
        .iter()
        .enumerate()
        .filter_map(|(l, c)| c.spearman.map(|s| (l, s)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(l, _)| l);
    Ok(SimilarityReport {
        cosines,
        per_sense,
        averaged: Correlation::of(&avg, &human),
        best_sense,
    })
}

impl SimilarityReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        writeln!(w, "representation,spearman,pearson")?;
        for (l, c) in self.per_sense.iter().enumerate() {
            writeln!(w, "sense_{l},{},{}", fmt(c.spearman), fmt(c.pearson))?;
        }
        writeln!(w, "average,{},{}", fmt(self.averaged.spearman), fmt(self.averaged.pearson))?;
        Ok(())
    }
}
