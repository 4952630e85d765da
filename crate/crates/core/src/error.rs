use thiserror::Error;

use crate::model_io::BundleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A buffer, frame or tensor had the wrong length or shape.
    #[error("input shape error: {0}")]
    Shape(String),
    /// Non-finite or otherwise invalid numeric content.
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    /// An API was driven out of contract (e.g. an uninitialized state).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("net spec error: {0}")]
    Spec(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

pub(crate) fn ensure_finite(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}
