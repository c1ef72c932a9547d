use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the correspondence pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("backend `{backend}`: {message}")]
    Backend { backend: String, message: String },

    #[error("layer {layer} is not provided by this backend")]
    UnsupportedLayer { layer: usize },

    #[error("backend `{0}` does not support gradients")]
    GradientsUnavailable(String),

    #[error("optimization diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("ensemble member {member}: {cause}")]
    EnsembleMember { member: usize, cause: Box<Error> },

    #[error("query {query}: {cause}")]
    Query { query: usize, cause: Box<Error> },

    #[error("dataset record {record}: {message}")]
    DatasetRecord { record: String, message: String },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("image `{id}`: {message}")]
    Image { id: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }

    pub fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::File { path: path.into(), message: message.into() }
    }

    pub fn config_key(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigKey { key: key.into(), message: message.into() }
    }

    pub fn backend(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend { backend: backend.into(), message: message.into() }
    }
}
