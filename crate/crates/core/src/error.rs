use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("zero vector passed to cosine distance")]
    ZeroVector,

    #[error("degenerate embedding index: {0}")]
    DegenerateIndex(String),

    #[error("unknown query id `{0}`")]
    UnknownQuery(String),

    #[error("insufficient classes: need at least 2, got {0}")]
    InsufficientClasses(usize),

    #[error("class `{0}` has no images")]
    EmptyClass(String),

    #[error("classifier has not been trained")]
    UntrainedClassifier,

    #[error("unknown artist `{0}`")]
    UnknownArtist(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("non-finite loss at iteration {iter}: {report}")]
    NonFiniteLoss { iter: u64, report: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("style `{style}`, image `{image}`: {source}")]
    Evaluation {
        style: String,
        image: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for the error variant, used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Dimension(_) => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::OutOfRange(_) => "out_of_range",
            Error::ZeroVector => "zero_vector",
            Error::DegenerateIndex(_) => "degenerate_index",
            Error::UnknownQuery(_) => "unknown_query",
            Error::InsufficientClasses(_) => "insufficient_classes",
            Error::EmptyClass(_) => "empty_class",
            Error::UntrainedClassifier => "untrained_classifier",
            Error::UnknownArtist(_) => "unknown_artist",
            Error::EmptyInput(_) => "empty_input",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::CorruptFile { .. } => "corrupt_file",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::Decode { .. } => "decode",
            Error::Frame { .. } => "frame",
            Error::Evaluation { .. } => "evaluation",
            Error::Io { .. } => "io",
        }
    }
}
