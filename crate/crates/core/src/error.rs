use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid model spec: {0}")]
    SpecValidation(String),

    #[error("operation `{op}` is not supported by variant {variant}")]
    UnsupportedVariant { op: &'static str, variant: String },

    #[error("z labels have a single class; a probe cannot be trained")]
    DegenerateLabels,

    #[error("non-finite value encountered: {0}")]
    NumericalFailure(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: bad format: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: cannot parse manifest: {message}")]
    ManifestParse { path: PathBuf, message: String },

    #[error("{path}: shape mismatch for `{name}`: manifest {found:?}, expected {expected:?}")]
    ShapeMismatch {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{path}: blob truncated: need {needed} bytes, have {available}")]
    TruncatedBlob {
        path: PathBuf,
        needed: u64,
        available: u64,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit status used by the CLI.
    ///
    /// 2 = config/validation, 3 = data, 4 = numerical failure, 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SpecValidation(_) | Error::Parameter(_) => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::ManifestParse { .. }
            | Error::ShapeMismatch { .. }
            | Error::TruncatedBlob { .. }
            | Error::Dimension { .. }
            | Error::DegenerateLabels => 3,
            Error::NumericalFailure(_) => 4,
            Error::Index { .. } | Error::Contract(_) | Error::UnsupportedVariant { .. } => 1,
        }
    }
}
