//! Error types shared across the crate.

use thiserror::Error;

/// All failure modes of the pipeline.
///
/// Variants are grouped by cause so callers (notably the CLI) can map them to
/// exit classes: file/format problems vs. invalid arguments vs. numerical
/// aborts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("empty scene: no valid points")]
    EmptyScene,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("text has no tokens")]
    ZeroTokens,

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing loss component: {0}")]
    MissingLossPart(&'static str),

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    /// True for errors caused by unreadable or malformed data/files, as
    /// opposed to bad arguments or numerical failures.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Corrupt(_)
                | Error::Io(_)
                | Error::Manifest(_)
        )
    }
}
