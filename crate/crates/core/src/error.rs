use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Which part of an ATRC file failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    Magic,
    Version,
    Dtype,
    Flags,
    Length,
    /// The in-memory matrix violates a [`TraceMatrix`](crate::trace::TraceMatrix) invariant.
    Invariant,
}

impl FormatErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FormatErrorKind::Magic => "magic",
            FormatErrorKind::Version => "version",
            FormatErrorKind::Dtype => "dtype",
            FormatErrorKind::Flags => "flags",
            FormatErrorKind::Length => "length",
            FormatErrorKind::Invariant => "invariant",
        }
    }
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error ({kind}): {detail}")]
    Format { kind: FormatErrorKind, detail: String },
    #[error("manifest error in entry {entry:?}: {reason}")]
    Manifest { entry: String, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("model format error: {0}")]
    ModelFormat(String),
    #[error("mutant not killable at rho = 1 (sigma = {sigma})")]
    NotKillable { sigma: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        Error::Format { kind, detail: detail.into() }
    }

    /// Short machine-readable name of the error variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Manifest { .. } => "manifest",
            Error::Shape(_) => "shape",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateData(_) => "degenerate_data",
            Error::SingularCovariance(_) => "singular_covariance",
            Error::ModelFormat(_) => "model_format",
            Error::NotKillable { .. } => "not_killable",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Json(_) => "json",
        }
    }

    pub fn format_kind(&self) -> Option<FormatErrorKind> {
        match self {
            Error::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
