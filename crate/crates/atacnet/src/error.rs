use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// An argument is out of its documented domain.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Malformed or inconsistent external data (dataset bytes, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file does not match the target model.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// A non-finite value surfaced where finite arithmetic is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
