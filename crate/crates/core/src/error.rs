use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },

    #[error("instance {instance}: embedding has dimension {got}, expected {expected}")]
    DimensionMismatch {
        instance: String,
        expected: usize,
        got: usize,
    },

    #[error("instance id {0:?} appears more than once")]
    DuplicateInstance(String),

    #[error("bag id {0:?} appears more than once")]
    DuplicateBag(String),

    #[error("bag {bag}: label {label} outside the label range [0, {max}]")]
    BagLabelOutOfRange { bag: String, label: f64, max: f64 },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("instance {0:?} has no gold label")]
    MissingGoldLabel(String),

    #[error("bag {0:?} has no label")]
    MissingBagLabel(String),

    #[error("instance {0:?} has no external prior")]
    MissingPrior(String),

    #[error("bag {0:?} has no context embedding")]
    MissingContext(String),

    #[error("unknown bag id {0:?}")]
    UnknownBag(String),

    #[error("empty input")]
    EmptyInput,

    #[error("score {value} at position {index} is outside (0, 1), required by the {approx} approximation")]
    ScoreOutOfRange {
        approx: &'static str,
        index: usize,
        value: f64,
    },

    #[error("undefined correlation: {0}")]
    DegenerateVector(String),

    #[error("loss term {0} has nonzero weight but is unavailable for this dataset")]
    UnavailableTerm(&'static str),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("pseudo-labeling not applicable: {0}")]
    NotApplicable(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
