use thiserror::Error;

/// Library-level error type.
#[derive(Debug, Error)]
pub enum RteError {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("solver did not converge: residual {residual} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("model error: {0}")]
    Model(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("container error: {0}")]
    Container(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
