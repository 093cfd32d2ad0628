use thiserror::Error;

/// Errors raised by the tensor substrate, adapters, model and training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("computation is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at step {step}: loss {loss} stayed above 10x initial loss {initial}")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        history: Box<crate::training::MetricsHistory>,
    },

    #[error("degenerate increments: {0}")]
    Degenerate(String),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
