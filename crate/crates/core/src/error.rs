use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed audio file: {0}")]
    Format(String),

    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no speech detected")]
    NoSpeech,

    #[error("unvoiced utterance")]
    Unvoiced,

    #[error("degenerate series: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("integration diverged: {0}")]
    Divergence(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("calibration file: {0}")]
    Calibration(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence(_))
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            hound::Error::FormatError(msg) => Error::Format(msg.to_string()),
            hound::Error::Unsupported => Error::Unsupported("unsupported WAV feature".into()),
            hound::Error::InvalidSampleFormat => {
                Error::Unsupported("invalid sample format".into())
            }
            other => Error::Format(other.to_string()),
        }
    }
}
