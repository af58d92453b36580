use std::path::PathBuf;

use thiserror::Error;

/// Failures while reading, validating or writing feature files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("unknown id `{0}` referenced by manifest")]
    UnknownId(String),
    #[error("dimension mismatch for `{id}`: expected {expected}, found {found}")]
    DimensionMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("non-finite feature value in `{0}`")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Failures inside model forward/backward computation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("missing input: {0}")]
    MissingInput(String),
}

/// A configuration problem, always tied to the offending key.
#[derive(Debug, Error)]
#[error("config error at `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

/// Top-level error used by the trainer, evaluator and command layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step} (batch {batch_ids:?}): {components}")]
    NonFiniteLoss {
        step: u64,
        batch_ids: Vec<String>,
        components: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command layer: 2 for configuration
    /// problems, 3 for everything that fails at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
