use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("numerical failure in {context} after {iterations} iterations")]
    Numerical { context: String, iterations: usize },

    #[error("all importance scores are zero")]
    DegenerateScores,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot split {samples} samples across {clients} clients")]
    InfeasiblePartition { clients: usize, samples: usize },

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub(crate) fn numerical(context: impl Into<String>, iterations: usize) -> Self {
        Error::Numerical {
            context: context.into(),
            iterations,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
