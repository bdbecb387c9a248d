//! Crate-wide error type and exit-code classification.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ItoError>;

#[derive(Debug, Error)]
pub enum ItoError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config validation failed:\n{}", .violations.join("\n"))]
    ConfigInvalid { violations: Vec<String> },

    #[error("integration blew up at step {step}: {detail}")]
    IntegrationBlowup { step: u64, detail: String },

    #[error("cannot sample transitions from trajectory '{trajectory}': {detail}")]
    Sampling { trajectory: String, detail: String },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {got} (expected {expected})")]
    BadVersion { expected: u32, got: u32 },

    #[error("file truncated while reading {what}")]
    Truncated { what: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("unknown token '{token}' (vocabulary: {vocabulary})")]
    UnknownToken { token: String, vocabulary: String },

    #[error("feature layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite value in {location}: {detail}")]
    NonFinite { location: String, detail: String },

    #[error("computation graph already consumed by backward")]
    GraphConsumed,

    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("degenerate alignment subset: {0}")]
    DegenerateAlignment(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ItoError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ItoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config/input, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use ItoError::*;
        match self {
            ShapeMismatch { .. } | InvalidInput(_) | ConfigInvalid { .. } | UnknownToken { .. }
            | LayoutMismatch(_) | GridMismatch(_) | EmptyInput(_) => 2,
            IntegrationBlowup { .. } | Sampling { .. } | NonFinite { .. } | GraphConsumed
            | IllConditioned(_) | DegenerateSpectrum(_) | DegenerateAlignment(_) => 3,
            BadMagic { .. } | BadVersion { .. } | Truncated { .. } | ChecksumMismatch { .. }
            | Format(_) | Io { .. } | Json(_) => 4,
        }
    }
}
