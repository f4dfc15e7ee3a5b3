use std::collections::HashMap;

use backpack::corpus::{
    pack_blocks, split_blocks, training_pair, Blocks, SplitFractions, SyntheticLexicon, Template, Vocabulary, BOS,
    RESERVED_IDS, UNK,
};
use backpack::model::TokenId;
use proptest::prelude::*;

#[test]
fn char_frequencies_follow_the_grammar() {
    for lex in [SyntheticLexicon::standard(0), SyntheticLexicon::two_topic(1), SyntheticLexicon::gendered(2)] {
        let corpus = lex.generate(100_000, 9).unwrap();
        let mut counts: HashMap<char, usize> = HashMap::new();
        let mut n = 0usize;
        for c in corpus.text.chars() {
            *counts.entry(c).or_insert(0) += 1;
            n += 1;
        }
        let expected = lex.expected_char_distribution();
        assert_eq!(counts.len(), expected.len());
        let tv: f64 = expected.iter().map(|(c, p)| (counts[c] as f64 / n as f64 - p).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.02, "total variation {tv}");
        let per_sentence = n as f64 / 100_000.0;
        assert!((per_sentence - lex.mean_sentence_chars()).abs() / lex.mean_sentence_chars() < 0.02);
    }
}

#[test]
fn annotations_point_at_their_words() {
    let lex = SyntheticLexicon::standard(3);
    let corpus = lex.generate(2_000, 4).unwrap();
    let chars: Vec<char> = corpus.text.chars().collect();
    assert!(!corpus.annotations.is_empty());
    for a in &corpus.annotations {
        let span: String = chars[a.start..a.start + a.len].iter().collect();
        assert_eq!(span, lex.words[a.word].text);
        assert_eq!(a.kind, lex.words[a.word].kind);
    }
    assert!(corpus.annotations.windows(2).all(|w| w[0].start + w[0].len <= w[1].start));
}

#[test]
fn generation_is_seeded() {
    let lex = SyntheticLexicon::two_topic(5);
    let a = lex.generate(500, 1).unwrap();
    assert_eq!(a, lex.generate(500, 1).unwrap());
    assert_ne!(a.text, lex.generate(500, 2).unwrap().text);
    assert_eq!(SyntheticLexicon::standard(7), SyntheticLexicon::standard(7));
}

#[test]
fn templates_parse_slots_and_literals() {
    let t = Template::parse("我[noun]很[adj]。", 1.0).unwrap();
    assert_eq!(t.slots().collect::<Vec<_>>(), vec!["noun", "adj"]);
    assert!(Template::parse("我[noun", 1.0).is_err());
    assert!(Template::parse("[]", 1.0).is_err());
}

#[test]
fn vocabulary_reserves_ids_and_rejects_unknowns() {
    let v = Vocabulary::build("乙甲乙丙").unwrap();
    assert_eq!(v.len(), RESERVED_IDS + 3);
    assert_eq!(v.id('乙'), Some(RESERVED_IDS as TokenId));
    assert_eq!(v.encode("乙丁"), vec![RESERVED_IDS as TokenId, UNK]);
    assert!(v.encode_strict("甲丁").is_err());
    assert_eq!(v.unknown_chars("丁甲戊丁"), vec!['丁', '戊']);
    let mut buf = Vec::new();
    let odd = Vocabulary::from_chars(['\t', '\n', '\\', 'a']);
    odd.write_to(&mut buf).unwrap();
    assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), odd);
}

proptest! {
    #[test]
    fn encode_decode_round_trip(text in "[a-z甲乙丙丁。，\\t\\n ]{0,40}") {
        let v = Vocabulary::build_all([text.as_str(), "x"]).unwrap();
        let ids = v.encode_strict(&text).unwrap();
        prop_assert_eq!(v.decode(&ids), text.clone());
        prop_assert_eq!(v.encode(&v.decode(&ids)), ids);
    }

    #[test]
    fn blocks_partition_the_stream(len in 1usize..400, size in 1usize..40, seed in 0u64..4) {
        let ids: Vec<TokenId> = (0..len as TokenId).collect();
        match pack_blocks(&ids, size, seed) {
            Err(_) => prop_assert!(len < size),
            Ok(b) => {
                prop_assert_eq!(b.len(), len / size);
                prop_assert!(b.blocks.iter().all(|x| x.len() == size && x[0] as usize % size == 0));
                let mut all: Vec<TokenId> = b.blocks.concat();
                all.sort_unstable();
                prop_assert_eq!(all, ids[..len / size * size].to_vec());
                prop_assert_eq!(&b, &pack_blocks(&ids, size, seed).unwrap());
            }
        }
    }
}

#[test]
fn short_streams_do_not_make_a_block() {
    let ids: Vec<TokenId> = vec![5; 1023];
    assert!(pack_blocks(&ids, 1024, 0).is_err());
    assert_eq!(pack_blocks(&[ids, vec![5]].concat(), 1024, 0).unwrap().len(), 1);
    assert!(pack_blocks(&[1, 2], 0, 0).is_err());
}

#[test]
fn block_order_depends_on_seed() {
    let ids: Vec<TokenId> = (0..1000).collect();
    let a = pack_blocks(&ids, 10, 1).unwrap();
    assert_ne!(a.blocks, pack_blocks(&ids, 10, 2).unwrap().blocks);
}

#[test]
fn training_pairs_shift_behind_bos() {
    let (x, y) = training_pair(&[7, 8, 9]);
    assert_eq!(x, vec![BOS, 7, 8]);
    assert_eq!(y, vec![7, 8, 9]);
}

#[test]
fn splits_are_disjoint_and_complete() {
    let ids: Vec<TokenId> = (0..2000).collect();
    let blocks = pack_blocks(&ids, 10, 3).unwrap();
    let s = split_blocks(blocks.clone(), SplitFractions { dev: 0.1, test: 0.05 }).unwrap();
    assert_eq!((s.dev.len(), s.test.len(), s.train.len()), (20, 10, 170));
    let rejoined = [s.dev.blocks, s.test.blocks, s.train.blocks].concat();
    assert_eq!(rejoined, blocks.blocks);
    assert!(split_blocks(blocks.clone(), SplitFractions { dev: 0.6, test: 0.4 }).is_err());
    let tiny = Blocks {
        block_size: 10,
        blocks: blocks.blocks[..2].to_vec(),
    };
    assert!(split_blocks(tiny, SplitFractions::default()).is_err());
}

#[test]
fn block_files_round_trip_and_reject_damage() {
    let ids: Vec<TokenId> = (0..100).collect();
    let b = pack_blocks(&ids, 7, 0).unwrap();
    let mut buf = Vec::new();
    b.write_to(&mut buf).unwrap();
    assert_eq!(Blocks::read_from(&buf[..]).unwrap(), b);
    assert!(Blocks::read_from(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(Blocks::read_from(&bad[..]).is_err());
}
