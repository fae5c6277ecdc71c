use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    InvalidArgument {
        what: &'static str,
        detail: String,
    },
    TimestepOrder {
        t: usize,
        t_prev: usize,
    },
    TimestepOutOfRange {
        t: usize,
        max: usize,
    },
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    NonBinaryMask,
    EmptyMask,
    EmptyTrainableSet,
    NoAdapters,
    RankTooLarge {
        rank: usize,
        max: usize,
    },
    ZeroNorm {
        frame: usize,
    },
    TooFewFrames {
        need: usize,
        got: usize,
    },
    UnknownParameter(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { what, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, found } => write!(f, "{op}: shape mismatch, expected {expected:?}, found {found:?}"),
            Error::InvalidArgument { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::TimestepOrder { t, t_prev } => {
                write!(f, "timestep order violated: t={t} must exceed t_prev={t_prev}")
            }
            Error::TimestepOutOfRange { t, max } => {
                write!(f, "timestep {t} outside schedule range [0, {max}]")
            }
            Error::IndexOutOfRange { what, index, len } => {
                write!(f, "{what} index {index} out of range for length {len}")
            }
            Error::NonBinaryMask => f.write_str("mask contains values other than 0 and 1"),
            Error::EmptyMask => f.write_str("mask selects no pixels"),
            Error::EmptyTrainableSet => f.write_str("trainable parameter set is empty"),
            Error::NoAdapters => f.write_str("no LoRA adapters attached"),
            Error::RankTooLarge { rank, max } => {
                write!(f, "LoRA rank {rank} exceeds maximum {max}")
            }
            Error::ZeroNorm { frame } => write!(f, "frame {frame} has zero norm"),
            Error::TooFewFrames { need, got } => {
                write!(f, "need at least {need} frames, got {got}")
            }
            Error::UnknownParameter(name) => write!(f, "unknown parameter `{name}`"),
        }
    }
}

impl core::error::Error for Error {}
