use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },
    #[error("label {0} outside {{0, 1, 2}}")]
    InvalidLabel(i64),
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("class {0} absent from the sampled set")]
    ClassAbsent(u8),
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    Divergence {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] tsccn_nn::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::EmptyManifest | Error::ManifestRow { .. } => "manifest",
            Error::InvalidLabel(_) => "label",
            Error::Image { .. } => "image",
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "input",
            Error::ClassAbsent(_) => "sampling",
            Error::Divergence { .. } => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Tensor(_) => "tensor",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
