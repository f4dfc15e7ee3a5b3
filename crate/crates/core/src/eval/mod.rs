//! Perplexity, cloze search, word representations and similarity.

mod cloze;
mod perplexity;
mod similarity;
mod words;

pub use cloze::{
    cloze_beam_search, continuation_logprob, run_cloze, Candidate, ClozeCase, ClozeOptions, ClozeOutcome,
    ClozeResult,
};
pub use perplexity::{mean_block_loss, perplexity, sequence_nll};
pub use similarity::{
    average_ranks, cosine, lexical_similarity, pearson, read_word_pairs, spearman, Correlation, SimilarityReport,
    WordPair,
};
pub use words::{
    compose_word_sense, composition_ratio, ratio_deviations, stability_report, word_ids, word_vec_average,
    PromptTemplate, StabilityReport, WordStability, BUCKET_LABELS, WORD_SLOT,
};
