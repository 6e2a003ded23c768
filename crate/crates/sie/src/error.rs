use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Adaptive refinement hit its size cap before the requested tolerance.
    #[error("resolution failure in {context}: reached n = {reached}, tail estimate {tail:.3e}")]
    ResolutionFailure {
        context: &'static str,
        reached: usize,
        tail: f64,
    },

    /// The leading finite section of the system is exactly singular.
    #[error("singular system: zero pivot at column {column}")]
    SingularSystem { column: usize },

    /// Pivoted Cholesky found a significantly negative diagonal entry.
    #[error("kernel is not nonnegative definite: diagonal {value:.3e} at step {step}")]
    NotNonnegativeDefinite { value: f64, step: usize },

    /// A cached factorization was replayed against a different system.
    #[error("factorization cache mismatch: {0}")]
    CacheMismatch(String),

    /// Operand bases do not line up.
    #[error("basis mismatch: {0}")]
    BasisMismatch(String),

    /// Evaluation of a weighted expansion exactly at a square-root endpoint singularity.
    #[error("expansion is singular at the endpoint {point}")]
    EndpointSingular { point: f64 },

    /// The requested operation is not defined for this basis or configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
