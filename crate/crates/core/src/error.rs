use std::io;

use crate::tokenizer::Field;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed MIDI file: {0}")]
    MalformedFile(String),
    #[error("unsupported MIDI file: {0}")]
    UnsupportedFormat(String),
    #[error("piece contains no notes")]
    EmptyPiece,
    #[error("{field} value {value} exceeds vocabulary bound {bound}")]
    VocabOverflow {
        field: &'static str,
        value: u64,
        bound: u64,
    },
    #[error("no pieces found")]
    EmptyCorpus,
    #[error("need at least {needed} pieces, got {got}")]
    TooFewPieces { needed: usize, got: usize },
    #[error("events are not sorted by onset (index {0})")]
    UnsortedInput(usize),
    #[error("grammar violation at token {index}: {reason}")]
    GrammarViolation { index: usize, reason: String },
    #[error("pad symbol found in token {index}, field {field}")]
    PadLeak { index: usize, field: Field },
    #[error("invalid delay schedule: {0}")]
    InvalidSchedule(String),
    #[error("malformed grid at step {step}, field {field}: {reason}")]
    MalformedGrid {
        step: usize,
        field: Field,
        reason: &'static str,
    },
    #[error("{what} {value} out of range {lo}..={hi}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },
    #[error("index {index} out of vocabulary for field {field} (size {size})")]
    IndexOutOfVocab { field: Field, index: u32, size: u32 },
    #[error("sequence of {len} steps exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("grid has no loss-contributing cells")]
    EmptyGrid,
    #[error("no feasible value for field {field} at step {step}")]
    NoFeasibleValue { step: usize, field: Field },
    #[error("bad format: {0}")]
    BadFormat(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("piece spans {bars} bar(s), need at least 2")]
    TooShort { bars: usize },
    #[error("prompt spans {bars} bar(s), need at least {needed}")]
    PromptTooShort { bars: usize, needed: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the input data rather than by a broken invariant.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. } | Error::NoFeasibleValue { .. })
    }
}
