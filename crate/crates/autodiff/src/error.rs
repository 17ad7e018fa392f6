use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BadBuffer { shape: [usize; 2], len: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("batchnorm in eval mode needs running statistics, none are populated")]
    CalibrationMissing,

    #[error("graph was modified after node {node} was recorded; rebuild the forward pass")]
    StaleGraph { node: usize },

    #[error("{op} has no second-derivative rule")]
    UnsupportedSecondOrder { op: &'static str },

    #[error("backward without a seed needs a 1x1 root, got {shape:?}")]
    NonScalarRoot { shape: [usize; 2] },

    #[error("variable belongs to a different graph")]
    ForeignVariable,
}
