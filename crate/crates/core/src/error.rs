use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape, geometry or configuration violation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// NaN/Inf values or a diverging iteration.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Malformed or corrupted file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
