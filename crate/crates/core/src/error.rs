//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for an operation. Carries both shapes.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid configuration (expert count 0, layer out of range, bad transition matrix, ...).
    Config(String),
    /// An index exceeded its bound (vocabulary lookup, class index, ...).
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A batch contributed zero masked frames; the mean loss is undefined.
    EmptyMask,
    /// `backward` called twice on the same graph without a reset.
    GraphReuse,
    /// `backward` called on a non-scalar node.
    NotScalar { shape: Vec<usize> },
    /// Stored totals or content hashes disagree with recomputed ones.
    Integrity(String),
    /// Training loss became non-finite.
    Diverged { step: u64 },
    /// A named parameter was missing or duplicated in the store.
    Param(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Index { what, index, bound } => {
                write!(f, "{what} index {index} out of bounds (< {bound})")
            }
            Error::EmptyMask => {
                write!(f, "batch has zero masked frames; resample masks before computing the loss")
            }
            Error::GraphReuse => {
                write!(f, "backward already ran on this graph; call reset_backward first")
            }
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            Error::Integrity(msg) => write!(f, "integrity error: {msg}"),
            Error::Diverged { step } => write!(f, "loss became non-finite at step {step}"),
            Error::Param(msg) => write!(f, "parameter error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}
