use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// The `Display` form is a single line that starts with a stable kind tag
/// (`invalid-argument:`, `format-error:`, ...) so the CLI can print it as a
/// machine-parsable error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
    #[error("capacity-error: {0}")]
    Capacity(String),
    #[error("encoding-error: unknown word {0:?}")]
    Encoding(String),
    #[error("decoding-error: {0}")]
    Decoding(String),
    #[error("format-error: {0}")]
    Format(String),
    #[error("config-error: {0}")]
    Config(String),
    #[error("non-finite-loss: step {step}, batch seed {batch_seed}")]
    NonFinite { step: usize, batch_seed: u64 },
    #[error("io-error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable kind tag, identical to the prefix of the `Display` output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Capacity(_) => "capacity-error",
            Error::Encoding(_) => "encoding-error",
            Error::Decoding(_) => "decoding-error",
            Error::Format(_) => "format-error",
            Error::Config(_) => "config-error",
            Error::NonFinite { .. } => "non-finite-loss",
            Error::Io(_) => "io-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
