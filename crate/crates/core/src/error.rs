use alloc::string::String;
use core::fmt;

/// Error type shared by all core modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes disagree; `detail` names the offending dimension.
    Shape { op: &'static str, detail: String },
    /// An argument violates a precondition (out-of-range ID, bad schedule, ...).
    Invalid { op: &'static str, detail: String },
    /// A non-finite value was produced or passed where finite data is required.
    NonFinite { op: &'static str, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Invalid { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::NonFinite { op, detail } => write!(f, "{op}: non-finite value: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! err_shape {
    ($op:expr, $($arg:tt)*) => {
        $crate::Error::Shape { op: $op, detail: alloc::format!($($arg)*) }
    };
}

macro_rules! err_invalid {
    ($op:expr, $($arg:tt)*) => {
        $crate::Error::Invalid { op: $op, detail: alloc::format!($($arg)*) }
    };
}

macro_rules! err_non_finite {
    ($op:expr, $($arg:tt)*) => {
        $crate::Error::NonFinite { op: $op, detail: alloc::format!($($arg)*) }
    };
}

pub(crate) use {err_invalid, err_non_finite, err_shape};
