use thiserror::Error;

/// Crate-wide error type. The variant name doubles as the machine-parsable
/// error class printed by the CLI on exit.
#[derive(Debug, Error)]
pub enum Error {
    /// Mis-shaped tensors, mismatched layer wiring, unknown layer types.
    #[error("config: {0}")]
    Config(String),

    /// NaN/Inf values or other numeric breakdown during a pass.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Caller misuse of the in-process API (missing gradients, wrong phase).
    #[error("usage: {0}")]
    Usage(String),

    /// Malformed input data (labels out of range, empty datasets).
    #[error("input: {0}")]
    Input(String),

    /// On-disk artifact framing errors (dataset files, arch files, checkpoints).
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable class tag, stable across messages.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Usage(_) => "usage",
            Error::Input(_) => "input",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
