use backpack::control::{
    amplification_ratio_eval, amplify_character, bias_score, bias_sense_ranking, bias_spec, forward_with_intervention,
    idiom_single_sense_probe, nullspace_debias, nullspace_debiased_model, remove_sense_spec, sense_projection_topk,
    span_spec, token_bias_ranking, InterventionSpec, Pronouns, Rule, Target,
};
use backpack::corpus::{Vocabulary, BOS};
use backpack::eval::PromptTemplate;
use backpack::model::{Backpack, ModelConfig, TokenId};
use backpack::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHARS: &str = "他她那个说是有。，我你来";

fn vocab() -> Vocabulary {
    Vocabulary::from_chars(CHARS.chars())
}

fn model(vocab_size: usize, senses: usize, seed: u64) -> Backpack<f64> {
    let cfg = ModelConfig {
        num_senses: senses,
        context_length: 16,
        ..ModelConfig::nano(vocab_size)
    };
    Backpack::new(cfg, seed).unwrap()
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend((1..n).map(|_| rng.random_range(3..v) as TokenId));
    ids
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn spec_text_round_trips() {
    let text = "pos=3 sense=2 mul=0.5\npos=他 sense=* mul=0 group=w\npos=#7 sense=1 mul=4";
    let spec = InterventionSpec::parse(text).unwrap();
    assert_eq!(spec.rules.len(), 3);
    assert_eq!(spec.rules[1].target, Target::Char('他'));
    assert_eq!(spec.rules[2].target, Target::Id(7));
    assert_eq!(spec.rules[1].sense, None);
    assert_eq!(InterventionSpec::parse(&spec.to_string()).unwrap(), spec);
    assert!(InterventionSpec::parse("\n# note\n\n").unwrap().rules.is_empty());
}

#[test]
fn spec_parse_errors_name_the_line() {
    for bad in [
        "pos=1 sense=0",
        "pos=1 sense=0 mul=-1",
        "pos=1 sense=0 mul=inf",
        "pos=1 sense=0 mul=1 colour=red",
        "pos=1 pos=2 mul=1",
        "pos=ab mul=1",
        "sense=1 mul=1",
        "pos=1 sense=x mul=1",
        "pos 1",
    ] {
        let err = InterventionSpec::parse(&format!("pos=0 mul=1\n{bad}")).unwrap_err();
        assert!(matches!(err, backpack::Error::Parse { line: 2, .. }), "{bad}: {err}");
    }
}

#[test]
fn identity_and_empty_specs_are_bit_identical() {
    let m = model(12, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let ids = random_ids(&mut rng, 9, 12);
        let base = m.forward(&ids).unwrap();
        let ones = InterventionSpec::parse("pos=0 sense=* mul=1\npos=3 sense=2 mul=1 group=a\npos=4 sense=* mul=1 group=a").unwrap();
        for spec in [ones, InterventionSpec::default()] {
            let out = forward_with_intervention(&m, &ids, &spec, None).unwrap();
            assert_eq!(out.logits.data(), base.logits.data());
        }
    }
}

#[test]
fn removing_a_term_subtracts_its_contribution() {
    let m = model(12, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = random_ids(&mut rng, 8, 12);
    let (j, l) = (3, 1);
    let spec = InterventionSpec::parse(&format!("pos={j} sense={l} mul=0")).unwrap();
    let after = forward_with_intervention(&m, &ids, &spec, None).unwrap();
    for i in j..ids.len() {
        let dec = m.decompose_logits(&ids, i).unwrap();
        let term = dec.contributions.iter().find(|c| c.position == j && c.sense == l).unwrap();
        let want: Vec<f64> = dec.logits.iter().zip(&term.values).map(|(a, b)| a - b).collect();
        assert!(max_abs_diff(after.logits.row(i), &want) <= 1e-4);
    }
}

#[test]
fn halving_halves_the_contribution() {
    let m = model(12, 4, 3);
    let ids = random_ids(&mut ChaCha8Rng::seed_from_u64(3), 7, 12);
    let spec = InterventionSpec::parse("pos=2 sense=3 mul=0.5").unwrap();
    let resolved = spec.resolve(&ids, None, 4).unwrap();
    for i in 2..ids.len() {
        let before = m.decompose_logits(&ids, i).unwrap();
        let after = m.decompose_with_hook(&ids, i, Some(&resolved)).unwrap();
        for (b, a) in before.contributions.iter().zip(&after.contributions) {
            if (b.position, b.sense) == (2, 3) {
                assert_eq!(a.weight, b.weight * 0.5);
            } else {
                assert_eq!(a.weight, b.weight);
            }
        }
    }
}

#[test]
fn stacked_multipliers_compose() {
    let m = model(12, 4, 4);
    let ids = random_ids(&mut ChaCha8Rng::seed_from_u64(4), 8, 12);
    let twice = InterventionSpec::parse("pos=2 sense=1 mul=0.5\npos=2 sense=1 mul=3").unwrap();
    let once = InterventionSpec::parse("pos=2 sense=1 mul=1.5").unwrap();
    let a = forward_with_intervention(&m, &ids, &twice, None).unwrap();
    let b = forward_with_intervention(&m, &ids, &once, None).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
}

#[test]
fn interventions_do_not_reach_back_in_time() {
    let m = model(12, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let ids = random_ids(&mut rng, 10, 12);
        let base = m.forward(&ids).unwrap();
        let spec = span_spec(4, &[3.0, 0.5, 2.0]).unwrap();
        let out = forward_with_intervention(&m, &ids, &spec, None).unwrap();
        for i in 0..4 {
            assert_eq!(out.logits.row(i), base.logits.row(i));
        }
        assert_ne!(out.logits.row(9), base.logits.row(9));
    }
}

#[test]
fn renormalization_preserves_span_mass() {
    let m = model(12, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let ids = random_ids(&mut rng, 10, 12);
        let start = rng.random_range(1..6);
        let mults: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..8.0)).collect();
        let base = m.forward(&ids).unwrap();
        let spec = span_spec(start, &mults).unwrap();
        let out = forward_with_intervention(&m, &ids, &spec, None).unwrap();
        for l in 0..4 {
            for i in start..ids.len() {
                let span = start..(start + 3).min(i + 1);
                let before: f64 = span.clone().map(|j| base.alpha.get(l, i, j)).sum();
                let after: f64 = span.map(|j| out.alpha.get(l, i, j)).sum();
                assert!((before - after).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn uniform_alpha_amplified_four_to_one() {
    let mut m = model(12, 4, 7);
    m.zero_contextualization();
    let ids: Vec<TokenId> = vec![BOS, 5, 6, 7, 8];
    let spec = span_spec(2, &[4.0, 1.0]).unwrap();
    let out = forward_with_intervention(&m, &ids, &spec, None).unwrap();
    for l in 0..4 {
        for i in 3..ids.len() {
            let mass = 2.0 / (i + 1) as f64;
            assert!((out.alpha.get(l, i, 2) - 0.8 * mass).abs() < 1e-12);
            assert!((out.alpha.get(l, i, 3) - 0.2 * mass).abs() < 1e-12);
        }
    }
}

#[test]
fn group_mass_cannot_vanish() {
    let m = model(12, 4, 8);
    let ids: Vec<TokenId> = vec![BOS, 5, 6, 7];
    let spec = InterventionSpec::parse("pos=1 mul=0 group=g\npos=2 mul=0 group=g").unwrap();
    assert!(matches!(
        forward_with_intervention(&m, &ids, &spec, None),
        Err(backpack::Error::Intervention(_))
    ));
}

#[test]
fn amplification_identity_and_untouched_rows() {
    let m = model(12, 4, 9);
    let ids: Vec<TokenId> = vec![BOS, 5, 6, 7, 8, 9];
    let ratios = amplification_ratio_eval(&m, &ids, 2, &[1.0, 1.0], &[3, 4, 5, 11]).unwrap();
    assert!(ratios.iter().all(|&r| r == 1.0));
    let base = m.forward(&ids).unwrap();
    let amp = amplify_character(&m, &ids, 2, 2, 0, 1.0).unwrap();
    assert_eq!(amp.logits.data(), base.logits.data());
    assert_eq!(amp.skipped_rows, 0);
    assert!(amplify_character(&m, &ids, 5, 2, 0, 4.0).is_err());
    assert!(amplify_character(&m, &ids, 2, 2, 2, 4.0).is_err());
    assert!(amplification_ratio_eval(&m, &ids, 2, &[4.0, 1.0], &[12]).is_err());
}

#[test]
fn remove_sense_spec_targets_each_distinct_character() {
    let v = vocab();
    let spec = remove_sense_spec(&v, "我你我", 3).unwrap();
    assert_eq!(
        spec.rules,
        ['我', '你']
            .map(|c| Rule {
                target: Target::Char(c),
                sense: Some(3),
                multiplier: 0.0,
                group: None,
            })
            .to_vec()
    );
    assert_eq!(bias_spec(" remove:3 ", &v, "我你").unwrap(), remove_sense_spec(&v, "我你", 3).unwrap());
    assert!(bias_spec("remove:x", &v, "我你").is_err());
    assert!(remove_sense_spec(&v, "我Q", 1).is_err());
    assert_eq!(bias_spec("pos=1 sense=2 mul=0.5", &v, "我").unwrap().rules[0].multiplier, 0.5);
}

fn tie_pronouns(m: &mut Backpack<f64>, v: &Vocabulary) {
    let (he, she) = (v.id('他').unwrap() as usize, v.id('她').unwrap() as usize);
    let mut e = m.embedding().clone();
    let row = e.row(he).to_vec();
    e.row_mut(she).copy_from_slice(&row);
    m.set_embedding(e).unwrap();
}

#[test]
fn symmetric_pronouns_score_one_and_rank_zero() {
    let v = vocab();
    let mut m = model(v.len(), 4, 10);
    tie_pronouns(&mut m, &v);
    let p = Pronouns::from_chars(&v, '他', '她').unwrap();
    let prompts = PromptTemplate::parse_lines("那个[WORD]说，\n[WORD]来").unwrap();
    assert_eq!(bias_score(&m, &v, "我你", &prompts, p, None).unwrap(), 1.0);
    assert!(bias_sense_ranking(&m, p.he, p.she).unwrap().iter().all(|&(_, s)| s == 0.0));
    let ids: Vec<TokenId> = "我你".chars().map(|c| v.id(c).unwrap()).collect();
    assert!(token_bias_ranking(&m, &ids, p.he, p.she).unwrap().iter().all(|&(_, s)| s == 0.0));
}

#[test]
fn bias_score_needs_pronouns_and_prompts() {
    let v = vocab();
    let m = model(v.len(), 4, 11);
    assert!(Pronouns::from_chars(&v, '他', 'Q').is_err());
    let p = Pronouns::from_chars(&v, '他', '她').unwrap();
    assert!(bias_score(&m, &v, "我", &[], p, None).is_err());
    let prompts = PromptTemplate::parse_lines("那个[WORD]说，").unwrap();
    let s = bias_score(&m, &v, "我", &prompts, p, None).unwrap();
    assert!(s >= 1.0);
    let out = m.forward(&prompts[0].encode(&v, "我").unwrap().0).unwrap();
    let row = out.logits.row(out.logits.shape()[0] - 1);
    let want = (row[p.he as usize] - row[p.she as usize]).abs().exp();
    assert!((s - want).abs() < 1e-12);
}

#[test]
fn rankings_are_sorted_and_match_direct_sums() {
    let v = vocab();
    let m = model(v.len(), 4, 12);
    let p = Pronouns::from_chars(&v, '他', '她').unwrap();
    let ids: Vec<TokenId> = "我你来".chars().map(|c| v.id(c).unwrap()).collect();
    let ranked = token_bias_ranking(&m, &ids, p.he, p.she).unwrap();
    assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    for &(l, score) in &ranked {
        let direct: f64 = ids
            .iter()
            .map(|&t| {
                let s = m.sense_logits(t, l).unwrap();
                (s[p.he as usize] - s[p.she as usize]).abs()
            })
            .sum();
        assert!((score - direct).abs() < 1e-12);
    }
    assert!(token_bias_ranking(&m, &[], p.he, p.she).is_err());

    let pron = bias_sense_ranking(&m, p.he, p.she).unwrap();
    assert_eq!(pron.len(), 4);
    assert!(pron.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn nullspace_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (v, d) = (10, 16);
    let mut table = Tensor::<f64>::new(vec![v, d], (0..v * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let p = Pronouns { he: 0, she: 1 };
    let dir: Vec<f64> = table.row(0).iter().zip(table.row(1)).map(|(a, b)| a - b).collect();
    // row 8 is orthogonal to the direction, row 9 equals it
    let r8: Vec<f64> = table.row(8).to_vec();
    let dot = r8.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() / dir.iter().map(|x| x * x).sum::<f64>();
    let ortho: Vec<f64> = r8.iter().zip(&dir).map(|(a, b)| a - dot * b).collect();
    table.row_mut(8).copy_from_slice(&ortho);
    table.row_mut(9).copy_from_slice(&dir);

    let out = nullspace_debias(&table, &[2, 3, 4, 8, 9], p).unwrap();
    for t in [2, 3, 4, 8, 9] {
        let dot: f64 = out.row(t).iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!(dot.abs() <= 1e-5);
    }
    assert!(max_abs_diff(out.row(8), &ortho) < 1e-12);
    assert!(out.row(9).iter().all(|x| x.abs() < 1e-12));
    for t in [0, 1, 5, 6, 7] {
        assert_eq!(out.row(t), table.row(t));
    }

    let mut flat = table.clone();
    let he = flat.row(0).to_vec();
    flat.row_mut(1).copy_from_slice(&he);
    assert!(nullspace_debias(&flat, &[2], p).is_err());
    assert!(nullspace_debias(&table, &[10], p).is_err());

    let m = model(12, 4, 13);
    let dm = nullspace_debiased_model(&m, &[5], Pronouns { he: 3, she: 4 }).unwrap();
    assert_ne!(dm.embedding().row(5), m.embedding().row(5));
    assert_eq!(dm.embedding().row(6), m.embedding().row(6));
}

#[test]
fn sense_topk_is_sorted_sense_logits() {
    let m = model(12, 4, 14);
    for l in 0..4 {
        let top = sense_projection_topk(&m, 5, l, 4).unwrap();
        let logits = m.sense_logits(5, l).unwrap();
        let mut order: Vec<usize> = (0..12).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        assert_eq!(top.iter().map(|&(t, _)| t as usize).collect::<Vec<_>>(), order[..4]);
        assert!(top.iter().all(|&(t, s)| s == logits[t as usize]));
    }
    assert!(sense_projection_topk(&m, 5, 4, 3).is_err());
    assert!(sense_projection_topk(&m, 5, 0, 0).unwrap().is_empty());
}

#[test]
fn single_sense_probes_add_up() {
    let m = model(12, 4, 15);
    let ids: Vec<TokenId> = vec![BOS, 5, 6, 7];
    let probes = idiom_single_sense_probe(&m, &ids, 8).unwrap();
    assert_eq!(probes.len(), 5);
    let full = probes.last().unwrap();
    assert_eq!(full.sense, None);
    let logits = m.forward(&ids).unwrap().logits.row(3).to_vec();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    assert_eq!(full.top as usize, order[0]);
    assert_eq!(full.target_rank, order.iter().position(|&t| t == 8).unwrap());
    let mut sum = vec![0.0; 12];
    for p in &probes[..4] {
        for (a, x) in sum.iter_mut().zip(&p.logits) {
            *a += x;
        }
    }
    assert!(max_abs_diff(&sum, &logits) <= 1e-4);

    let one = model(12, 1, 15);
    let probes = idiom_single_sense_probe(&one, &ids, 8).unwrap();
    assert_eq!(probes[0].target_rank, probes[1].target_rank);
    assert!(max_abs_diff(&probes[0].logits, &probes[1].logits) <= 1e-12);
    assert!(idiom_single_sense_probe(&m, &ids, 12).is_err());
}
