use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: {detail}")]
    Shape { axis: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic in {path}: expected SKT1")]
    BadMagic { path: PathBuf },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("size mismatch in {path}: header describes {expected} bytes, file holds {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unexpected rank {found} in {path} (expected {expected})")]
    Rank {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("manifest schema error at `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("manifest validation failed for {path}: {detail}")]
    Validation { path: PathBuf, detail: String },

    #[error("video too short: {n} frames, sampler requires at least {required}")]
    VideoTooShort { n: usize, required: usize },

    #[error("no negative source available")]
    NoNegativeSource,

    #[error("target encoder requires single-frame clips (got d = {0})")]
    MultiFrameTarget(usize),

    #[error("checkpoint fingerprint mismatch: checkpoint has {found}, configuration expects {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("analytic and numeric gradients disagree: {0}")]
    GradientMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Fingerprint { .. } | Error::InvalidArgument(_) => {
                ErrorClass::Config
            }
            Error::NonFinite(_) | Error::GradientMismatch(_) => ErrorClass::Numerical,
            Error::Shape { .. } | Error::MultiFrameTarget(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::BadMagic { .. } => "bad_magic",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::Rank { .. } => "rank",
            Error::Schema { .. } => "schema",
            Error::Validation { .. } => "validation",
            Error::VideoTooShort { .. } => "video_too_short",
            Error::NoNegativeSource => "no_negative_source",
            Error::MultiFrameTarget(_) => "multi_frame_target",
            Error::Fingerprint { .. } => "fingerprint",
            Error::NonFinite(_) => "non_finite",
            Error::GradientMismatch(_) => "gradient_mismatch",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
