use std::io;

use crate::corpus::Arch;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty instruction")]
    EmptyInstruction,

    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("line {line}: block id {id} appears twice in function `{function}`")]
    DuplicateBlockOrdinal {
        line: usize,
        function: String,
        id: u64,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary is empty")]
    ZeroVocabulary,

    #[error("corpus mixes architectures ({0} and {1})")]
    MixedArchitectures(Arch, Arch),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("blocks come from different architectures")]
    ArchMismatch,

    #[error("blocks come from different optimization levels")]
    OptMismatch,

    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("empty input sequence")]
    EmptySequence,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("training or validation set is empty")]
    EmptyDataset,

    #[error("empty path")]
    EmptyPath,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("scored set needs at least one positive and one negative")]
    DegenerateLabels,

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
