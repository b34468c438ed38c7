use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; reports both operands.
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Input outside an operation's numeric domain.
    #[error("{op}: value {value} at flat index {index} outside domain")]
    Domain {
        op: &'static str,
        value: f64,
        index: usize,
    },

    /// A caller broke an operation's stated precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Raster / checkpoint file structure problems, with the byte offset
    /// at which parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A metric that is undefined on the given pixel population.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Bad run configuration (unknown key, unparsable value, invalid range).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value produced where finite output is guaranteed.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn eval(msg: impl Into<String>) -> Self {
        Error::Eval(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
