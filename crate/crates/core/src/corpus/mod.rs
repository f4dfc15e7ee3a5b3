//! Character vocabulary, block packing and synthetic corpora.

mod blocks;
mod synthetic;
mod vocab;

pub use blocks::{pack_blocks, split_blocks, training_pair, Blocks, SplitFractions, Splits};
pub use synthetic::{
    char_unigram_entropy, Annotation, Piece, SyntheticCorpus, SyntheticLexicon, Template, WordKind, LexWord,
};
pub use vocab::{Vocabulary, BOS, PAD, RESERVED_IDS, UNK};
