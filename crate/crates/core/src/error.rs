use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{axis} index {value} out of range (size {size})")]
    OutOfBounds {
        axis: &'static str,
        value: usize,
        size: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("window extent {axis}={value} must be an even positive integer")]
    OddWindow { axis: &'static str, value: usize },

    #[error(
        "dense mask of {spatial_tokens} spatial tokens exceeds the cap of {cap}; use the windowed kernel instead"
    )]
    MaskTooLarge { spatial_tokens: usize, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty receptive field for query row {0}")]
    EmptyReceptiveField(usize),

    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
