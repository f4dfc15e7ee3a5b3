use std::io::Cursor;

use backpack::corpus::{pack_blocks, Blocks, Vocabulary, WordKind, BOS};
use backpack::eval::{
    average_ranks, cloze_beam_search, compose_word_sense, composition_ratio, lexical_similarity, mean_block_loss,
    pearson, perplexity, read_word_pairs, spearman, stability_report, word_ids, word_vec_average, ClozeCase,
    ClozeOptions, PromptTemplate, WordPair,
};
use backpack::model::{Backpack, ModelConfig, TokenId};
use backpack::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(vocab_size: usize, seed: u64) -> Backpack<f64> {
    let cfg = ModelConfig {
        context_length: 24,
        ..ModelConfig::nano(vocab_size)
    };
    Backpack::new(cfg, seed).unwrap()
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// `1 − 6Σd² / (n(n² − 1))`, valid without ties.
fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64).collect() };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn correlations_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..10.0)).collect();
        assert!((pearson(&x, &y).unwrap() - naive_pearson(&x, &y)).abs() <= 1e-10);
        assert!((spearman(&x, &y).unwrap() - naive_spearman(&x, &y)).abs() <= 1e-10);
    }
}

#[test]
fn correlation_edge_cases() {
    let h = [1.0, 4.0, 2.5, 9.0, 7.0];
    let affine: Vec<f64> = h.iter().map(|v| 0.1 * v - 3.0).collect();
    assert!((pearson(&affine, &h).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&affine, &h).unwrap() - 1.0).abs() < 1e-12);
    let reversed: Vec<f64> = h.iter().map(|v| -v.powi(3)).collect();
    assert!((spearman(&reversed, &h).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&[2.0; 5], &h), None);
    assert_eq!(spearman(&[2.0; 5], &h), None);
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

fn repr(seed_word: &str, k: usize, d: usize) -> Tensor<f64> {
    let seed = seed_word.chars().map(|c| c as u64).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![k, d], (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn lexical_similarity_reports_per_sense_and_average() {
    let words = ["甲乙", "丙丁", "戊己", "庚辛", "壬癸", "子丑"];
    let pairs: Vec<WordPair> = (0..5)
        .map(|i| WordPair {
            a: words[i].into(),
            b: words[i + 1].into(),
            score: i as f64 * 1.5 + 0.3,
        })
        .collect();
    let r = lexical_similarity(&pairs, |w| Ok(repr(w, 3, 8))).unwrap();
    assert_eq!(r.per_sense.len(), 3);
    assert_eq!(r.cosines.len(), 5);
    let human: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    for l in 0..3 {
        let c: Vec<f64> = r.cosines.iter().map(|(p, _)| p[l]).collect();
        assert!((r.per_sense[l].pearson.unwrap() - naive_pearson(&c, &human)).abs() <= 1e-10);
        assert!((r.per_sense[l].spearman.unwrap() - naive_spearman(&c, &human)).abs() <= 1e-10);
    }
    let best = r.best_sense.unwrap();
    assert!(r.per_sense.iter().all(|c| c.spearman.unwrap() <= r.per_sense[best].spearman.unwrap()));
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("representation,spearman,pearson\nsense_0,"));
    assert!(csv.contains("\naverage,"));

    let same = lexical_similarity(&pairs, |_| Ok(repr("x", 2, 4))).unwrap();
    assert_eq!(same.averaged.spearman, None);
    let mut csv = Vec::new();
    same.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().contains("undefined"));

    assert!(lexical_similarity(&pairs[..2], |w| Ok(repr(w, 2, 4))).is_err());
    let flat: Vec<WordPair> = pairs.iter().map(|p| WordPair { score: 1.0, ..p.clone() }).collect();
    assert!(lexical_similarity(&flat, |w| Ok(repr(w, 2, 4))).is_err());
}

#[test]
fn word_pair_parsing() {
    let pairs = read_word_pairs(Cursor::new("甲\t乙\t3.5\n\n丙\t丁\t1\n")).unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[1].score, 1.0);
    for bad in ["甲\t乙\n", "甲\t乙\tx\n", "甲\t乙\t1\t2\n"] {
        assert!(matches!(
            read_word_pairs(Cursor::new(format!("a\tb\t1\n{bad}"))),
            Err(backpack::Error::Parse { line: 2, .. })
        ));
    }
}

#[test]
fn cloze_case_parsing() {
    let cases = ClozeCase::read_all(Cursor::new("他说\t你好\t。\n他\t你好吗\t\n")).unwrap();
    assert_eq!(cases[0].full_text(), "他说你好。");
    assert_eq!(cases[1].ending, "");
    assert!(ClozeCase::new("a", "b", "c").is_err());
    assert!(ClozeCase::new("a", "bcdef", "c").is_err());
    assert!(matches!(
        ClozeCase::read_all(Cursor::new("a\tbc\td\nab\n")),
        Err(backpack::Error::Parse { line: 2, .. })
    ));
}

#[test]
fn beam_candidates_are_ranked_and_avoid_reserved_ids() {
    let m = model(9, 2);
    let res = cloze_beam_search(&m, &[5, 6], 2, &[7], ClozeOptions { beam_width: 4, skip_reserved: true }).unwrap();
    assert_eq!(res.candidates.len(), 4);
    assert!(res.candidates.windows(2).all(|w| w[0].total() >= w[1].total()));
    assert!(res.candidates.iter().all(|c| c.ids.len() == 2 && c.ids.iter().all(|&t| t >= 3)));
    assert_eq!(res.truncated, 0);
}

#[test]
fn perplexity_ignores_block_order() {
    let m = model(10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<TokenId> = (0..200).map(|_| rng.random_range(3..10)).collect();
    let blocks = pack_blocks(&ids, 16, 0).unwrap();
    let mut shuffled = blocks.blocks.clone();
    shuffled.shuffle(&mut rng);
    let other = Blocks {
        block_size: blocks.block_size,
        blocks: shuffled,
    };
    let a = mean_block_loss(&m, &blocks).unwrap();
    let b = mean_block_loss(&m, &other).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!((perplexity(&m, &blocks).unwrap() - a.exp()).abs() < 1e-9);
    // an untrained model is close to uniform over the vocabulary
    assert!((a - 10f64.ln()).abs() < 0.5);
    let empty = Blocks {
        block_size: 16,
        blocks: vec![],
    };
    assert!(mean_block_loss(&m, &empty).is_err());
}

#[test]
fn composition_ratios_are_distributions() {
    let m = model(12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let mut ids = vec![BOS];
        ids.extend((0..10).map(|_| rng.random_range(3..12) as TokenId));
        let len = rng.random_range(1..4);
        let start = rng.random_range(1..ids.len() - len);
        let r = composition_ratio(&m, &ids, start, len).unwrap();
        assert_eq!(r.len(), 4);
        for row in &r {
            assert_eq!(row.len(), len);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert!(composition_ratio(&m, &[BOS, 5, 6], 1, 2).is_err());
    assert!(composition_ratio(&m, &[BOS, 5, 6], 2, 0).is_err());
}

#[test]
fn composed_senses_ignore_context_order_and_duplicates() {
    let m = model(12, 5);
    let bank = m.sense_bank().unwrap();
    let word: Vec<TokenId> = vec![7, 8];
    let contexts: Vec<(Vec<TokenId>, usize)> = vec![
        (vec![BOS, 4, 7, 8, 5, 6], 2),
        (vec![BOS, 7, 8, 9, 9], 1),
        (vec![BOS, 3, 3, 3, 7, 8, 10], 4),
    ];
    let a = compose_word_sense(&m, &bank, &word, &contexts).unwrap();
    let mut perm = contexts.clone();
    perm.reverse();
    let b = compose_word_sense(&m, &bank, &word, &perm).unwrap();
    let doubled: Vec<_> = contexts.iter().chain(&contexts).cloned().collect();
    let c = compose_word_sense(&m, &bank, &word, &doubled).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.data().iter().zip(c.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(compose_word_sense(&m, &bank, &word, &[(vec![BOS, 7, 9, 8], 1)]).is_err());
    assert!(compose_word_sense(&m, &bank, &word, &[]).is_err());

    let avg = word_vec_average(&bank, &word).unwrap();
    let (k, d) = (bank.num_senses(), bank.dim());
    assert_eq!(avg.shape(), &[k, d]);
    for l in 0..k {
        for c in 0..d {
            let want = (bank.sense(7, l)[c] + bank.sense(8, l)[c]) / 2.0;
            assert!((avg.data()[l * d + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn stability_of_identical_contexts_is_perfect() {
    let vocab = Vocabulary::from_chars("甲乙丙丁戊己庚辛。，".chars());
    let m = model(vocab.len(), 6);
    let words = vec![("甲乙".to_string(), WordKind::Compound), ("丙丁戊".to_string(), WordKind::Idiom)];
    let same = PromptTemplate::parse_lines("己[WORD]庚辛。\n己[WORD]庚辛。").unwrap();
    let r = stability_report(&m, &vocab, &words, &same).unwrap();
    for w in &r.words {
        assert!(w.deviations.iter().all(|&d| d == 0.0));
        assert_eq!(w.buckets, [4, 0, 0]);
    }
    assert_eq!(r.fractions(WordKind::Compound), Some([1.0, 0.0, 0.0]));
    assert_eq!(r.fractions(WordKind::Loanword), None);

    let varied = PromptTemplate::parse_lines("己[WORD]庚辛。\n[WORD]，\n戊己庚[WORD]辛甲").unwrap();
    let r = stability_report(&m, &vocab, &words, &varied).unwrap();
    for kind in [WordKind::Compound, WordKind::Idiom] {
        let f = r.fractions(kind).unwrap();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("type,<=10%,<=20%,>20%\ncompound,"));
    assert!(stability_report(&m, &vocab, &words, &varied[..1]).is_err());
    assert!(stability_report(&m, &vocab, &[("Q".into(), WordKind::Idiom)], &varied).is_err());
}

#[test]
fn prompt_templates() {
    let vocab = Vocabulary::from_chars("甲乙丙".chars());
    let t = PromptTemplate::new("甲[WORD]丙").unwrap();
    assert_eq!(t.fill("乙乙"), ("甲乙乙丙".to_string(), 1));
    let (ids, start) = t.encode(&vocab, "乙").unwrap();
    assert_eq!(ids[0], BOS);
    assert_eq!(start, 2);
    assert_eq!(ids[start], vocab.id('乙').unwrap());
    assert!(PromptTemplate::new("no slot").is_err());
    assert!(PromptTemplate::new("[WORD][WORD]").is_err());
    assert!(t.encode(&vocab, "丁").is_err());
    assert!(word_ids(&vocab, "").is_err());
}
