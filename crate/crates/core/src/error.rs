use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("index ({row}, {col}) out of range for {rows}x{cols}")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric positive-definite ({0})")]
    NotSpd(String),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    SvdNoConvergence { sweeps: usize, off: f64 },

    #[error("invalid rank {rank} for a {rows}x{cols} matrix")]
    InvalidRank { rank: usize, rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("matrix mean must be positive, got {0}")]
    NonPositiveMean(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("loss node is not scalar (shape {0}x{1})")]
    NonScalarLoss(usize, usize),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("non-finite training loss on matrix {id}: {loss}")]
    Diverged { id: String, loss: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NotSpd(_)
                | Error::SvdNoConvergence { .. }
                | Error::Diverged { .. }
        )
    }
}
