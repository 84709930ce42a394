use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prediction {0} is outside the open interval (0, 1)")]
    PredictionOutOfRange(f64),

    #[error("propensity score {value} at row {row} is outside (0, 1]")]
    InvalidPropensity { row: usize, value: f64 },

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("dataset has no labeled rows")]
    NoLabeledRows,

    #[error("propensity attribute column {column} is continuous ({levels} distinct values)")]
    ContinuousPropensityAttribute { column: usize, levels: usize },

    #[error("non-finite loss encountered at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("training diverged: loss {loss} fell below guard {guard}")]
    Diverged { loss: f64, guard: f64 },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("format version mismatch: {0}")]
    VersionMismatch(String),

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical optimization itself, as opposed
    /// to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::Diverged { .. })
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
