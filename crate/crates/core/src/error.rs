use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two operands that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A timestep or index outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// NaN or infinity appeared in sampler or optimizer state.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dims(what: &str, expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::Dimension(format!("{what}: expected {expected:?}, found {found:?}"))
    }
}
