//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// Errors surfaced by the library and mapped to CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument to an operation (bad sizes, out-of-range ids, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed or unusable data (non-finite frames, empty datasets, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A transcript word is missing from the lexicon.
    #[error("lexicon error: unknown word {0:?}")]
    UnknownWord(String),

    /// Example encoding violated the token-range contract.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Artifacts built against different codebooks / vocab maps were mixed.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    /// A pipeline stage is missing a prerequisite artifact.
    #[error("staging error in stage {stage:?}: {missing}")]
    Staging { stage: String, missing: String },

    /// Bad experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 2 config, 3 data/compatibility, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
