use std::io::BufRead;

use crate::corpus::{Vocabulary, BOS, RESERVED_IDS};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, TokenId};
use crate::scalar::Scalar;
use crate::tensor::kernels::log_softmax_row;

/// A sentence whose last significant word is masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClozeCase {
    pub prefix: String,
    pub masked: String,
    pub ending: String,
}

impl ClozeCase {
    pub fn new(prefix: &str, masked: &str, ending: &str) -> Result<Self> {
        let n = masked.chars().count();
        if !(2..=4).contains(&n) {
            return Err(Error::Eval(format!("masked word `{masked}` has {n} characters, expected 2 to 4")));
        }
        Ok(Self {
            prefix: prefix.into(),
            masked: masked.into(),
            ending: ending.into(),
        })
    }

    pub fn full_text(&self) -> String {
        format!("{}{}{}", self.prefix, self.masked, self.ending)
    }

    /// Reads `prefix\tmasked\tending` lines.
    pub fn read_all(r: impl BufRead) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected 3 tab-separated fields, found {}", parts.len()),
                });
            }
            out.push(Self::new(parts[0], parts[1], parts[2]).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClozeOptions {
    pub beam_width: usize,
    /// Never propose reserved ids (pad, unk, bos).
    pub skip_reserved: bool,
}

impl Default for ClozeOptions {
    fn default() -> Self {
        Self {
            beam_width: 10,
            skip_reserved: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub ids: Vec<TokenId>,
    /// Log-probability of the candidate characters.
    pub word_score: f64,
    /// Log-probability of the ending given prefix and candidate.
    pub ending_score: f64,
}

impl Candidate {
    pub fn total(&self) -> f64 {
        self.word_score + self.ending_score
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClozeResult {
    /// Best first.
    pub candidates: Vec<Candidate>,
    /// Prefix tokens dropped from the left to fit the context.
    pub truncated: usize,
}

impl ClozeResult {
    /// 0-based rank of `ids` among the candidates.
    pub fn rank_of(&self, ids: &[TokenId]) -> Option<usize> {
        self.candidates.iter().position(|c| c.ids == ids)
    }

    pub fn in_top(&self, ids: &[TokenId], k: usize) -> bool {
        self.rank_of(ids).is_some_and(|r| r < k)
    }
}

/// Log-probability of `continuation` following `context` (which starts with BOS).
pub fn continuation_logprob<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    context: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    let mut input = context.to_vec();
    input.extend_from_slice(&continuation[..continuation.len() - 1]);
    let logits = model.logits(&input)?;
    let base = context.len() - 1;
    Ok(continuation
        .iter()
        .enumerate()
        .map(|(t, &c)| log_softmax_row(logits.row(base + t))[c as usize])
        .sum())
}

/// Beam search for `masked_len` tokens after `prefix`. Every expansion of
/// the final step is scored with the ending log-probability before ranking,
/// so a beam at least as wide as the number of partial candidates gives the
/// exhaustive optimum.
pub fn cloze_beam_search<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    prefix: &[TokenId],
    masked_len: usize,
    ending: &[TokenId],
    opts: ClozeOptions,
) -> Result<ClozeResult> {
    if masked_len == 0 || opts.beam_width == 0 {
        return Err(Error::Eval("masked length and beam width must be positive".into()));
    }
    let ctx = model.config().context_length;
    // BOS + prefix + candidate + ending minus its last token must fit.
    let fixed = 1 + masked_len + ending.len().saturating_sub(1);
    if fixed > ctx {
        return Err(Error::ContextLength { len: fixed, max: ctx });
    }
    let truncated = (prefix.len() + fixed).saturating_sub(ctx);
    let mut context = vec![BOS];
    context.extend_from_slice(&prefix[truncated..]);

    let vocab = model.config().vocab_size;
    let first = if opts.skip_reserved { RESERVED_IDS.min(vocab) } else { 0 };
    let mut beams: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    for step in 0..masked_len {
        let mut expanded = Vec::new();
        for (seq, score) in &beams {
            let mut input = context.clone();
            input.extend_from_slice(seq);
            let logits = model.logits(&input)?;
            let lp = log_softmax_row(logits.row(input.len() - 1));
            for (tok, &l) in lp.iter().enumerate().skip(first) {
                let mut s = seq.clone();
                s.push(tok as TokenId);
                expanded.push((s, score + l));
            }
        }
        if step + 1 < masked_len {
            sort_desc(&mut expanded);
            expanded.truncate(opts.beam_width);
            beams = expanded;
        } else {
            let mut cands = Vec::with_capacity(expanded.len());
            for (ids, word_score) in expanded {
                let mut c = context.clone();
                c.extend_from_slice(&ids);
                let ending_score = continuation_logprob(model, &c, ending)?;
                cands.push(Candidate {
                    ids,
                    word_score,
                    ending_score,
                });
            }
            cands.sort_by(|a, b| b.total().total_cmp(&a.total()).then_with(|| a.ids.cmp(&b.ids)));
            cands.truncate(opts.beam_width);
            return Ok(ClozeResult {
                candidates: cands,
                truncated,
            });
        }
    }
    unreachable!("masked_len >= 1")
}

fn sort_desc(v: &mut [(Vec<TokenId>, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Outcome of one text cloze case.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeOutcome {
    pub case: ClozeCase,
    pub predictions: Vec<(String, f64)>,
    pub truncated: usize,
    pub top1: bool,
    pub top3: bool,
}

pub fn run_cloze<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    case: &ClozeCase,
    opts: ClozeOptions,
) -> Result<ClozeOutcome> {
    let prefix = vocab.encode(&case.prefix);
    let masked = vocab.encode(&case.masked);
    let ending = vocab.encode(&case.ending);
    let res = cloze_beam_search(model, &prefix, masked.len(), &ending, opts)?;
    Ok(ClozeOutcome {
        case: case.clone(),
        predictions: res
            .candidates
            .iter()
            .map(|c| (vocab.decode(&c.ids), c.total()))
            .collect(),
        truncated: res.truncated,
        top1: res.in_top(&masked, 1),
        top3: res.in_top(&masked, 3),
    })
}
