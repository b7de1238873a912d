use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("waveform too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("no frames left after voice activity detection")]
    EmptyAfterVad,

    #[error("utterance of {frames} frames is shorter than the minimum chunk of {min} frames")]
    ChunkSkipped { frames: usize, min: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unknown gradient check id `{0}`")]
    UnknownOp(String),

    #[error("missing utterance `{0}`")]
    MissingUtterance(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input or configuration rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidInput(_)
                | Error::UnknownOp(_)
                | Error::Shape(_)
                | Error::Json(_)
        )
    }
}
