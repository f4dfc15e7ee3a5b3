use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    ContextLength { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient in `{param}`; step aborted")]
    NonFiniteGradient { param: String },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("intervention: {0}")]
    Intervention(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
