use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("not enough subjects ({subjects}) for {splits} non-empty splits")]
    NotEnoughSubjects { subjects: usize, splits: usize },

    #[error("singular normal matrix; use a ridge weight > 0")]
    SingularSystem,

    #[error("channel mismatch: model expects {expected:?}, request has {got:?}")]
    ChannelMismatch { expected: Vec<String>, got: Vec<String> },

    #[error("oracle forecasters need a simulator context; this sample has none")]
    NoSimulatorContext,

    #[error("recorded duration must be positive")]
    ZeroDuration,

    #[error("unsupported schema version {0}")]
    SchemaVersion(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
