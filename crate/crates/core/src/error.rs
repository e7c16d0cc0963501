use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value in {what} at sample {sample}")]
    NonFinite { what: &'static str, sample: usize },
    #[error("unresolvable words: {0:?}")]
    UnknownWords(Vec<String>),
    #[error("zero-norm word vector for {0:?}: cosine similarity is undefined")]
    ZeroNorm(String),
    #[error("encoder failed for {} sample(s): {}", .0.len(), .0.iter().map(|(i, m)| format!("#{i}: {m}")).collect::<Vec<_>>().join("; "))]
    Encode(Vec<(usize, String)>),
    #[error("prompt of length {len} exceeds context length {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("archive error: {0}")]
    Archive(String),
    #[error("content hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
