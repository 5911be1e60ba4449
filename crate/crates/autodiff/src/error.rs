use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or layer settings.
    #[error("configuration error in {op}: {detail}")]
    Config { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("numeric error: {op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Config { op, detail: detail.into() }
    }
}
