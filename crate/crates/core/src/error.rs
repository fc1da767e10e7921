use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable wav {path}: {reason}")]
    Wav { path: PathBuf, reason: String },
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("input too short: {what} needs at least {needed}, got {got}")]
    TooShort {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("noise signal has zero power")]
    SilentNoise,
    #[error("reference signal has zero power")]
    SilentReference,
    #[error("sample rate {0} Hz where 16000 Hz is required")]
    SampleRate(u32),
    #[error("word `{0}` is not in the lexicon and has no letter fallback")]
    OutOfVocabulary(String),
    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid duration: {0}")]
    InvalidDuration(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("speaker id {id} outside the table of {n} speakers")]
    UnknownSpeaker { id: usize, n: usize },
    #[error("label {label} outside classifier range {n}")]
    LabelOutOfRange { label: usize, n: usize },
    #[error("CTC target of length {target} cannot be aligned to {frames} frames")]
    CtcInfeasible { target: usize, frames: usize },
    #[error("wrong task for this forward: expected {expected}, got {got}")]
    WrongTask { expected: String, got: String },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config hash mismatch: checkpoint {checkpoint}, config {config}")]
    HashMismatch { checkpoint: String, config: String },
    #[error("missing {0}")]
    Missing(String),
    #[error("empty reference")]
    EmptyReference,
    #[error("run directory is locked by another process: {0}")]
    Locked(PathBuf),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code for CLI failure lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Wav { .. } | Error::UnsupportedEncoding(_) => "E_AUDIO",
            Error::TooShort { .. } => "E_TOO_SHORT",
            Error::SilentNoise | Error::SilentReference => "E_SILENT",
            Error::SampleRate(_) => "E_SAMPLE_RATE",
            Error::OutOfVocabulary(_) => "E_OOV",
            Error::LengthMismatch { .. } | Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::InvalidDuration(_) => "E_DURATION",
            Error::UnknownParameter(_) => "E_PARAM",
            Error::UnknownSpeaker { .. } => "E_SPEAKER",
            Error::LabelOutOfRange { .. } => "E_LABEL",
            Error::CtcInfeasible { .. } => "E_CTC",
            Error::WrongTask { .. } | Error::InvalidBatch(_) => "E_BATCH",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Config(_) => "E_CONFIG",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::HashMismatch { .. } => "E_HASH",
            Error::Missing(_) => "E_MISSING",
            Error::EmptyReference => "E_EMPTY_REF",
            Error::Locked(_) => "E_LOCKED",
            Error::Serde(_) => "E_SERDE",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
