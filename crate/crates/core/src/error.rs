use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty attention row: query {0} has no visible keys")]
    EmptyAttention(usize),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("load error: tensor `{tensor}`: {reason}")]
    Load { tensor: String, reason: String },

    #[error("container error: {0}")]
    Container(String),

    #[error("position error: {0}")]
    Position(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("packing error: {0}")]
    Packing(String),

    #[error("dataset error: {path}:{line}: {reason}")]
    Dataset { path: String, line: usize, reason: String },

    #[error("label trie error: {0}")]
    Trie(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
