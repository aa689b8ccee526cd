use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfuError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid attention mask: {0}")]
    Mask(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("draft proposed token {token} with zero draft probability")]
    Proposal { token: u32 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfuError>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::ConfuError::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
