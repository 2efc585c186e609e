use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model evaluation produced a non-finite value for {field} at {location}")]
    NonFiniteModel { field: String, location: String },

    #[error("numerical blow-up at time node {time_index}: {detail}")]
    NumericalBlowup { time_index: usize, detail: String },

    #[error("iteration did not converge within {max_iter} sweeps (last residual {last_residual:.3e})")]
    NonConvergence {
        max_iter: usize,
        last_residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("validity check failed: {0}")]
    Validity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
