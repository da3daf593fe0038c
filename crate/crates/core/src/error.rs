use alloc::string::String;

/// Errors produced by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rectangle {top},{left}+{size} outside {height}x{width} frame")]
    OutOfBounds {
        top: usize,
        left: usize,
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("timestep {t} outside 0..={t_max}")]
    Timestep { t: usize, t_max: usize },
    #[error("capacity shortfall: need {needed} carriers, image offers {available}")]
    Capacity { needed: usize, available: usize },
    #[error("spectrum is not conjugate-symmetric (imaginary residue {0:e})")]
    ImaginaryResidue(f64),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("tape error: {0}")]
    Tape(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
