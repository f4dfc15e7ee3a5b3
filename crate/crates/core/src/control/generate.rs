use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::intervention::{InterventionSpec, Rule, Target};
use crate::corpus::{Vocabulary, BOS, RESERVED_IDS};
use crate::error::{Error, Result};
use crate::model::{Backpack, LanguageModel, TokenId};
use crate::scalar::Scalar;
use crate::tensor::kernels::log_softmax_row;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateSettings {
    pub max_new_tokens: usize,
    /// `0` decodes greedily.
    pub temperature: f64,
    pub seed: u64,
    /// Alternatives reported per step.
    pub top: usize,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            temperature: 0.0,
            seed: 0,
            top: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationStep {
    pub token: TokenId,
    pub prob: f64,
    /// Most probable tokens at this step, best first.
    pub top: Vec<(TokenId, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<GenerationStep>,
}

/// Rules for a window that starts at prompt offset `dropped` (BOS at 0).
/// Positions are prompt indices; rules whose target left the window or
/// does not occur in it are left out for this step.
fn window_spec(spec: &InterventionSpec, window: &[TokenId], dropped: usize, vocab: Option<&Vocabulary>) -> Result<InterventionSpec> {
    let mut rules = Vec::new();
    for r in &spec.rules {
        let target = match &r.target {
            Target::Position(p) => match (p + 1).checked_sub(dropped) {
                Some(i) if i >= 1 && i < window.len() => Target::Position(i),
                _ => continue,
            },
            Target::Id(t) if window[1..].contains(t) => Target::Id(*t),
            Target::Char(c) => {
                let v = vocab.ok_or_else(|| Error::Intervention(format!("character target {c:?} needs a vocabulary")))?;
                let t = v
                    .id(*c)
                    .ok_or_else(|| Error::Intervention(format!("character {c:?} not in vocabulary")))?;
                if !window[1..].contains(&t) {
                    continue;
                }
                Target::Id(t)
            }
            Target::Id(_) => continue,
        };
        rules.push(Rule {
            target,
            ..r.clone()
        });
    }
    InterventionSpec::new(rules)
}

/// Continues `prompt` token by token. Reserved ids are never produced. When
/// the sequence outgrows the context the oldest tokens are dropped and BOS
/// stays in front. Spec positions index the prompt, BOS excluded.
pub fn generate<T: Scalar>(
    model: &Backpack<T>,
    prompt: &[TokenId],
    settings: &GenerateSettings,
    spec: Option<&InterventionSpec>,
    vocab: Option<&Vocabulary>,
) -> Result<Generation> {
    let cfg = model.config();
    if prompt.is_empty() {
        return Err(Error::Contract("empty prompt".into()));
    }
    if !(settings.temperature >= 0.0 && settings.temperature.is_finite()) {
        return Err(Error::Contract(format!("temperature {} must be finite and >= 0", settings.temperature)));
    }
    if cfg.vocab_size <= RESERVED_IDS {
        return Err(Error::Contract("vocabulary has no ordinary tokens".into()));
    }
    if let Some(s) = spec {
        for r in &s.rules {
            if let Some(l) = r.sense.filter(|&l| l >= cfg.num_senses) {
                return Err(Error::Index {
                    index: l,
                    bound: cfg.num_senses,
                });
            }
            if let Target::Position(p) = r.target {
                if p >= prompt.len() {
                    return Err(Error::Intervention(format!(
                        "position {p} outside a prompt of {}",
                        prompt.len()
                    )));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut seq = prompt.to_vec();
    let mut steps = Vec::with_capacity(settings.max_new_tokens);
    for _ in 0..settings.max_new_tokens {
        let keep = cfg.context_length - 1;
        let dropped = seq.len().saturating_sub(keep);
        let mut window = vec![BOS];
        window.extend_from_slice(&seq[dropped..]);
        let out = match spec {
            Some(s) if !s.rules.is_empty() => {
                let ws = window_spec(s, &window, dropped, vocab)?;
                let resolved = ws.resolve(&window, vocab, cfg.num_senses)?;
                model.forward_with_hook(&window, Some(&resolved))?
            }
            _ => model.forward(&window)?,
        };
        let lp = log_softmax_row(out.logits.row(window.len() - 1));
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let allowed = RESERVED_IDS..probs.len();
        let token = if settings.temperature == 0.0 {
            allowed
                .clone()
                .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                .expect("ordinary tokens exist")
        } else {
            let top = allowed.clone().map(|t| lp[t]).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = allowed.clone().map(|t| ((lp[t] - top) / settings.temperature).exp()).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Contract(e.to_string()))?;
            RESERVED_IDS + dist.sample(&mut rng)
        };
        let mut order: Vec<usize> = allowed.collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        steps.push(GenerationStep {
            token: token as TokenId,
            prob: probs[token],
            top: order
                .into_iter()
                .take(settings.top)
                .map(|t| (t as TokenId, probs[t]))
                .collect(),
        });
        seq.push(token as TokenId);
    }
    Ok(Generation {
        tokens: seq[prompt.len()..].to_vec(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Backpack<f64> {
        let cfg = ModelConfig {
            context_length: 6,
            ..ModelConfig::nano(9)
        };
        Backpack::new(cfg, 3).unwrap()
    }

    #[test]
    fn greedy_is_argmax_and_deterministic() {
        let m = model();
        let s = GenerateSettings {
            max_new_tokens: 8,
            ..GenerateSettings::default()
        };
        let a = generate(&m, &[4, 5], &s, None, None).unwrap();
        assert_eq!(a, generate(&m, &[4, 5], &s, None, None).unwrap());
        assert_eq!(a.tokens.len(), 8);
        for step in &a.steps {
            assert_eq!(step.top[0].0, step.token);
            assert!(step.token as usize >= RESERVED_IDS);
            assert_eq!(step.top.len(), 5);
        }
    }

    #[test]
    fn identity_spec_changes_nothing() {
        let m = model();
        let s = GenerateSettings {
            max_new_tokens: 6,
            temperature: 0.7,
            seed: 9,
            top: 3,
        };
        let plain = generate(&m, &[4, 5, 6], &s, None, None).unwrap();
        let ones = InterventionSpec::parse("pos=0 sense=* mul=1\npos=2 sense=1 mul=1 group=g\npos=#7 sense=* mul=1").unwrap();
        assert_eq!(plain, generate(&m, &[4, 5, 6], &s, Some(&ones), None).unwrap());
        assert_eq!(plain, generate(&m, &[4, 5, 6], &s, Some(&InterventionSpec::default()), None).unwrap());
    }

    #[test]
    fn sampling_depends_on_seed_only() {
        let m = model();
        let s = |seed| GenerateSettings {
            max_new_tokens: 12,
            temperature: 5.0,
            seed,
            top: 1,
        };
        assert_eq!(
            generate(&m, &[4], &s(1), None, None).unwrap(),
            generate(&m, &[4], &s(1), None, None).unwrap()
        );
        let outs: Vec<_> = (0..6).map(|k| generate(&m, &[4], &s(k), None, None).unwrap().tokens).collect();
        assert!(outs.iter().any(|o| o != &outs[0]));
    }

    #[test]
    fn rejects_bad_requests() {
        let m = model();
        let s = GenerateSettings::default();
        assert!(generate(&m, &[], &s, None, None).is_err());
        let far = InterventionSpec::parse("pos=5 sense=* mul=2").unwrap();
        assert!(generate(&m, &[4, 5], &s, Some(&far), None).is_err());
        let sense = InterventionSpec::parse("pos=0 sense=4 mul=2").unwrap();
        assert!(generate(&m, &[4, 5], &s, Some(&sense), None).is_err());
        let hot = GenerateSettings {
            temperature: -1.0,
            ..s
        };
        assert!(generate(&m, &[4], &hot, None, None).is_err());
    }
}
