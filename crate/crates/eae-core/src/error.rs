//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EaeError {
    /// Shape disagreement between a tensor and what an operation expects.
    #[error("dimension mismatch at layer {layer}: expected width {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    /// Generic shape error outside a layered network.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid model or network description.
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    /// Numerically singular linear system.
    #[error("singular system in {context}: condition estimate {cond:.3e}")]
    Singular { context: String, cond: f64 },

    /// Quadrature grid unable to support the requested computation.
    #[error("grid error: {0}")]
    Grid(String),

    /// Boltzmann weight has not decayed at the integration boundary.
    #[error("tail mass at grid boundary is {fraction:.3e} of the partition function (limit {limit:.1e})")]
    TailMass { fraction: f64, limit: f64 },

    /// Malformed binary file (IDX, checkpoint, ensemble, dataset cache).
    #[error("format error in {path} at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    /// Invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Explicit integrator driven outside its stability region.
    #[error("stability error: {0}")]
    Stability(String),

    /// Trajectory integration diverged.
    #[error("divergence at integration step {step}: {context}")]
    Divergence { context: String, step: usize },

    /// Operation requires more data than was supplied.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
