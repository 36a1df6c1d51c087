use thiserror::Error;

/// Errors raised by the crowd-calibration toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("no annotations or vote counts available{}", id_suffix(.0))]
    NoAnnotations(Option<String>),

    #[error("agreement is undefined for a single vote{}", id_suffix(.0))]
    SingleAnnotator(Option<String>),

    #[error("record {id}: vote_counts {counts:?} disagree with annotation tally {tally:?}")]
    VoteMismatch {
        id: String,
        counts: Vec<u64>,
        tally: Vec<u64>,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("empty input")]
    EmptyInput,

    #[error("annotator panel is empty")]
    EmptyPanel,

    #[error("duplicate annotator id {0:?} in panel")]
    DuplicateAnnotator(String),

    #[error("non-finite loss at epoch {epoch} (last finite loss {last_finite:?})")]
    NonFiniteLoss { epoch: usize, last_finite: Option<f64> },

    #[error("only one class present in the labels")]
    DegenerateLabels,

    #[error("need at least one correct and one incorrect sample")]
    DegenerateClasses,

    #[error("non-finite score for sample {0}")]
    NonFiniteScore(String),

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("dataset header missing or invalid: {0}")]
    MissingHeader(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn id_suffix(id: &Option<String>) -> String {
    match id {
        Some(id) => format!(" (record {id})"),
        None => String::new(),
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
