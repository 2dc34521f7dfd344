//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // Audio I/O and corpus ingestion.
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt wav file: {0}")]
    CorruptFile(String),
    #[error("manifest row references missing audio file: {0}")]
    MissingAudio(PathBuf),
    #[error("transcript contains character outside the alphabet: {0:?}")]
    InvalidTranscript(char),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),

    // Feature extraction and models.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("input too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // Training.
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    DivergedTraining { epoch: usize },

    // CTC.
    #[error("target is infeasible for {frames} frames (needs at least {needed})")]
    InfeasibleTarget { frames: usize, needed: usize },
    #[error("instance too large for the brute-force oracle (T \u{2264} 8, alphabet \u{2264} 3)")]
    TooLargeForOracle,

    // Metrics.
    #[error("CER is undefined for an empty original transcript")]
    EmptyOriginal,
    #[error("signal is all zeros; dB level undefined")]
    SilentSignal,
    #[error("every clean transcription is empty; nothing to evaluate")]
    AllTranscriptsEmpty,

    // Attack.
    #[error("non-finite gradient encountered during the attack")]
    GradientNonFinite,

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}
