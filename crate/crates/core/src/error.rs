use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("payload {path} has {actual} bytes, expected {expected}")]
    PayloadSizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite value at row {row}, col {col} (offending rows: {offending_rows:?})")]
    NonFiniteValue {
        row: usize,
        col: usize,
        offending_rows: Vec<usize>,
    },
    #[error("csv line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("csv header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty tensor")]
    EmptyTensor,
    #[error("PCA basis has not been fitted")]
    UnfittedPca,
    #[error("too few samples: need {needed}, have {available}")]
    TooFewSamples { needed: usize, available: usize },
    #[error("tensor shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("no known in-distribution samples")]
    NoIdSamples,
    #[error("cluster model has no surrogate labels")]
    UnfittedModel,
    #[error("training labels contain a single class")]
    SingleClassTrainingSet,
    #[error("scores contain a single class")]
    SingleClass,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(&'static str),
    #[error("too few runs: need at least {needed}, have {available}")]
    TooFewRuns { needed: usize, available: usize },
    #[error("stage {0:?} has no labels")]
    EmptyStage(String),
    #[error("need at least 2 logits, got {0}")]
    TooFewLogits(usize),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("covariance is singular even after regularization")]
    SingularCovariance,
    #[error("class {class:?} has {count} samples, need at least 2")]
    TooFewSamplesPerClass { class: String, count: usize },
    #[error("logits are not available for {0} samples")]
    MissingLogits(usize),
    #[error("sample {0:?} has no coordinates")]
    MissingCoordinates(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no statistics over an empty sample")]
    EmptyStats,
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("sample {sample_id:?}: {source}")]
    Sample {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) | Error::InvalidTemperature(_) => {
                ErrorKind::Config
            }
            Error::Io { .. }
            | Error::MalformedManifest(_)
            | Error::PayloadSizeMismatch { .. }
            | Error::NonFiniteValue { .. }
            | Error::RaggedRow { .. }
            | Error::HeaderMismatch(_)
            | Error::DimensionMismatch { .. }
            | Error::ShapeMismatch { .. }
            | Error::EmptyTensor
            | Error::MissingLogits(_)
            | Error::MissingCoordinates(_)
            | Error::LengthMismatch { .. }
            | Error::Json { .. } => ErrorKind::Data,
            Error::Stage { source, .. } | Error::Sample { source, .. } => source.kind(),
            _ => ErrorKind::Runtime,
        }
    }
}
