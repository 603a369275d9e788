//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for model, training, assimilation and harness code.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad static configuration (dimensions, indices, file contents).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation contract (shape/range mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The integrator produced values beyond the blow-up threshold.
    #[error("integration blow-up at step {step}: |{value:.3e}| exceeds {limit:.1e}")]
    IntegrationBlowup { step: usize, value: f64, limit: f64 },

    /// A reverse pass would exceed the configured storage cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// Line search or iteration budget exhausted without progress.
    #[error("optimization stalled: {0}")]
    OptimizationStalled(String),

    /// Training data cannot support the requested model.
    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    /// Training loss exploded past the divergence guard.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// Not enough samples for a statistical estimate.
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// Covariance estimation produced an unusable matrix.
    #[error("covariance estimation failed: {0}")]
    Estimation(String),

    /// A metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Too few archived analyses to build an ensemble yet.
    #[error("spin-up: {0}")]
    SpinUp(String),

    /// A cycling experiment left the attractor and never recovered.
    #[error("experiment diverged: {0}")]
    ExperimentDiverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
