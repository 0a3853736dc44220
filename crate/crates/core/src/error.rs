use thiserror::Error;

/// Broad failure classes, used by the command line to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error at line {line}: {message}")]
    Ingest { line: u64, message: String },

    #[error("degenerate data: dimension {dim} is constant (min == max == {value})")]
    Degenerate { dim: usize, value: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("model file error: {0}")]
    Model(String),

    #[error("incompatible model and data: {0}")]
    Compatibility(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorClass::Usage,
            Error::Divergence { .. } | Error::Oracle(_) => ErrorClass::Numeric,
            Error::Shape { .. }
            | Error::Data(_)
            | Error::Ingest { .. }
            | Error::Degenerate { .. }
            | Error::Evaluation(_)
            | Error::Model(_)
            | Error::Compatibility(_)
            | Error::Report(_)
            | Error::Io(_) => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
