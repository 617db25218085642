use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A scalar or structural argument is out of its valid domain.
    Argument(String),
    /// A non-finite value was produced or supplied.
    Numerical(String),
    /// Transient state (fast memory) does not fit the current call.
    State(String),
    /// A model or experiment configuration violates its invariants.
    Config(String),
    /// Dataset-level problem (e.g. a class with too few images).
    Data(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "dimension error in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Argument(m) => write!(f, "invalid argument: {m}"),
            Error::Numerical(m) => write!(f, "numerical error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
