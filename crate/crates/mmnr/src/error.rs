//! Crate-wide error type and the exit-code mapping used by the CLI.

use std::io;
use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for every fallible operation in the pipeline.
///
/// Variants are grouped by how the CLI reports them: configuration problems
/// exit with code 2, data/format problems with code 3 and numeric failures
/// with code 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // --- configuration -----------------------------------------------------
    /// A parameter value is outside its documented domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Failed to parse a TOML configuration document.
    #[error("failed to parse config: {0}")]
    ConfigParse(#[from] toml::de::Error),

    // --- data / formats ----------------------------------------------------
    /// Underlying I/O failure (missing file, permissions, short read...).
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A serialized artifact did not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    /// A serialized artifact declares a format version this build cannot read.
    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u16,
        supported: u16,
    },

    /// A serialized artifact ended before its declared payload was complete.
    #[error("truncated payload in {path}: needed {needed} more bytes at {section}")]
    Truncated {
        path: PathBuf,
        section: &'static str,
        needed: usize,
    },

    /// Header fields describe an impossible or inconsistent shape.
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    /// JSON (de)serialization failure for manifests and reports.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// An operation was handed too little data to do its job.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    // --- numerics ----------------------------------------------------------
    /// Vector lengths disagree where they must match.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// A vector that must have a nonzero norm was (numerically) zero.
    #[error("zero-norm vector where a direction is required")]
    ZeroNorm,

    /// Shapes of grids/maps disagree where they must match.
    #[error("shape mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },

    /// A numeric routine produced NaN/Inf or failed to make progress.
    #[error("numeric failure: {0}")]
    Numeric(String),

    // --- context -----------------------------------------------------------
    /// An error that surfaced inside a named pipeline stage; reports with the
    /// inner error's exit code.
    #[error("stage {stage}, class {class}: {source}")]
    Stage {
        stage: &'static str,
        class: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Helper to wrap an I/O error with the offending path.
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI uses for this error class.
    ///
    /// 2 = configuration error, 3 = data/format error, 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::ConfigParse(_) => 2,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::MalformedHeader { .. }
            | Error::Json(_)
            | Error::InsufficientData(_) => 3,
            Error::DimMismatch { .. }
            | Error::ZeroNorm
            | Error::ShapeMismatch { .. }
            | Error::Numeric(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }

    /// Wraps `self` with the pipeline stage and class it surfaced in.
    pub fn in_stage(self, stage: &'static str, class: &str) -> Self {
        Error::Stage {
            stage,
            class: class.to_string(),
            source: Box::new(self),
        }
    }
}
