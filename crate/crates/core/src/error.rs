use thiserror::Error;

/// Crate-wide error type. Every fallible runtime call returns `Result<T>`.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank {rank} out of range for size {size}")]
    RankOutOfRange { rank: usize, size: usize },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid weight scheme: {0}")]
    WeightScheme(String),

    #[error("non-finite value in tensor `{name}` at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("startup failed: rank {rank} unreachable ({detail})")]
    Startup { rank: usize, detail: String },

    #[error("fabric shut down while waiting ({0})")]
    Shutdown(String),

    #[error("deadlock detected: {0}")]
    Deadlock(String),

    #[error("negotiation rejected `{name}`: {detail}")]
    Negotiation { name: String, detail: String },

    #[error("window `{name}`: {detail}")]
    Window { name: String, detail: String },

    #[error("mutex misuse on window `{name}`: {detail}")]
    Mutex { name: String, detail: String },

    #[error("handle {0} unknown or already consumed")]
    HandleConsumed(u64),

    #[error("numerical degeneracy: {0}")]
    Degeneracy(String),

    #[error("divergence detected: {0}")]
    Divergence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {detail}")]
    ConfigParse { line: usize, detail: String },

    #[error("wire format error: {0}")]
    Wire(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
