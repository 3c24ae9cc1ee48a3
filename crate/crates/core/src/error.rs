use std::path::PathBuf;

use crate::tags::Span;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no context")]
    NoContext,
    #[error("empty turn at index {0}")]
    EmptyTurn(usize),
    #[error("empty source utterance")]
    EmptySource,
    #[error("empty target utterance in example {0}")]
    EmptyTarget(String),
    #[error("invalid token {0:?}: tokens must be non-empty and contain no whitespace")]
    InvalidToken(String),
    #[error("span {span} at position {pos} is out of range for a context of {len} tokens")]
    SpanOutOfRange { pos: usize, span: Span, len: usize },
    #[error("slot-count mismatch at {pos}: rule has {expected} slots, {found} spans given")]
    SlotCountMismatch { pos: usize, expected: usize, found: usize },
    #[error("tag lengths do not match a source of {n} tokens: {detail}")]
    TagLength { n: usize, detail: String },
    #[error("unknown rule id {0}")]
    UnknownRuleId(usize),
    #[error("rule {0:?} is not in the vocabulary")]
    UnknownRule(String),
    #[error("malformed bracketed tree: {0}")]
    TreeParse(String),
    #[error("rule has {slots} slots but the model supports at most {max}")]
    TooManySlots { slots: usize, max: usize },
    #[error("operation requires {0} mode")]
    WrongMode(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary has {vocab} rules but the checkpoint expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("missing predictions for ids: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("{path}:{line}: {source}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NoContext | Error::EmptyTurn(_) | Error::EmptySource | Error::EmptyTarget(_) => {
                "invalid_example"
            }
            Error::InvalidToken(_) => "invalid_token",
            Error::SpanOutOfRange { .. } | Error::SlotCountMismatch { .. } | Error::TagLength { .. } => {
                "invalid_tags"
            }
            Error::UnknownRuleId(_) | Error::UnknownRule(_) => "unknown_rule",
            Error::TreeParse(_) => "tree_parse",
            Error::TooManySlots { .. } => "too_many_slots",
            Error::WrongMode(_) => "wrong_mode",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::MissingPredictions(_) => "missing_predictions",
            Error::DuplicateId(_) => "duplicate_id",
            Error::Jsonl { .. } | Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}
