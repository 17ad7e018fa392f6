use std::path::PathBuf;

use larar_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, LararError>;

#[derive(Debug, Error)]
pub enum LararError {
    #[error(transparent)]
    Engine(#[from] AutodiffError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("label column `{0}` not found")]
    MissingLabelColumn(String),

    #[error("label column is not binary: {0}")]
    NonBinaryLabel(String),

    #[error("stratified split needs both classes, found only label {0}")]
    SingleClass(u8),

    #[error("input has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("unsupported format version {found} (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("attack failed: {0}")]
    AttackFailure(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("calibration needs at least two samples to estimate a spread, got {0}")]
    DegenerateCalibration(usize),

    #[error("model carries no detection thresholds; calibrate it first")]
    Uncalibrated,

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<LararError>,
    },

    #[error("report serialization failed: {0}")]
    Serialization(String),
}

impl LararError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LararError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_cell(self, cell: impl Into<String>) -> Self {
        LararError::Cell {
            cell: cell.into(),
            source: Box::new(self),
        }
    }
}
