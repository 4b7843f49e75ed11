use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("state error: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error on line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("script error: {0}")]
    Script(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("archive is missing required tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("archive contains unknown tensors: {}", .0.join(", "))]
    UnknownTensors(Vec<String>),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
