//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("attribute vector length mismatch: expected {expected}, got {got}")]
    AttributeLength { expected: usize, got: usize },

    #[error("attribute values must be 0 or 1 (got {value} at position {index})")]
    NonBinaryAttribute { value: String, index: usize },

    #[error("empty input set: {0}")]
    EmptySet(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing component: {0}")]
    MissingComponent(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("numerical guard tripped: {0}")]
    NumericGuard(String),

    #[error("unknown kind: {0}")]
    UnknownKind(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at {location}: {message}")]
    Data { location: String, message: String },

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    CheckpointIntegrity(String),

    #[error("stage dependency not satisfied: {0}")]
    StageDependency(String),

    #[error("refusing to overwrite {0} (use --force)")]
    WouldOverwrite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI surface: 1 usage, 2 data, 3 dependency/checkpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::OutOfRange(_) | Error::UnknownKind(_) => 1,
            Error::MissingComponent(_)
            | Error::CheckpointVersion { .. }
            | Error::CheckpointIntegrity(_)
            | Error::StageDependency(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
