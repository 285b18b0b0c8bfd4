use thiserror::Error;

/// Errors raised by the vocoder, analysis and conversion routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample {index} = {value} lies outside [-1, 1]")]
    InputRange { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no voiced frame to anchor F0 interpolation")]
    NoVoicedFrames,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
