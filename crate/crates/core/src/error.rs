use thiserror::Error;

/// Errors raised anywhere in the search engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// An iteration failed to converge or produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller violated a shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The run configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !($cond) {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
