use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// Every variant maps to a stable machine-readable code via [`Error::code`],
/// which the command-line front end prints alongside the message.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("unsupported marker 0x{marker:02X}: {reason}")]
    UnsupportedMarker { marker: u8, reason: String },

    #[error("corrupt bitstream: {0}")]
    CorruptBitstream(String),

    #[error("missing table: {0}")]
    MissingTable(String),

    #[error("coefficient {value} at block {block}, index {index} exceeds baseline limits")]
    CoefficientOutOfRange {
        block: usize,
        index: usize,
        value: i32,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("first and second quantization matrices are identical")]
    SameMatrix,

    #[error("no usable images in corpus: {0}")]
    EmptyCorpus(String),

    #[error("insufficient quantization matrix pool: {0}")]
    InsufficientQPool(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("scores need at least one positive and one negative label")]
    DegenerateLabels,

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnsupportedMarker { .. } => "UnsupportedMarker",
            Error::CorruptBitstream(_) => "CorruptBitstream",
            Error::MissingTable(_) => "MissingTable",
            Error::CoefficientOutOfRange { .. } => "CoefficientOutOfRange",
            Error::Domain(_) => "DomainError",
            Error::Dimension(_) => "DimensionError",
            Error::SameMatrix => "SameMatrixError",
            Error::EmptyCorpus(_) => "EmptyCorpus",
            Error::InsufficientQPool(_) => "InsufficientQPool",
            Error::Shape(_) => "ShapeError",
            Error::NonFinite(_) => "NonFinite",
            Error::Config(_) => "ConfigError",
            Error::EmptySplit(_) => "EmptySplit",
            Error::DegenerateLabels => "DegenerateLabels",
            Error::Format(_) => "FormatError",
            Error::Path { .. } => "PathError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptBitstream(msg.into())
    }

    pub fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
