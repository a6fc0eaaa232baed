use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: String,
    },

    #[error("matmul inner dimension mismatch: [.., {m}, {k_left}] x [.., {k_right}, {n}]")]
    MatmulDims {
        m: usize,
        k_left: usize,
        k_right: usize,
        n: usize,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("no active tape: nothing was recorded for this loss")]
    NoTape,

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension error: {0}")]
    Dim(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
