//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its admissible range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A coefficient argument (SINR, epsilon, ...) violates its precondition.
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),

    /// Geometry degenerated (zero distance, zero reference vector, ...).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// Steering angle at the tan() singularity.
    #[error("singular steering angle {0}")]
    SingularSteering(f64),

    /// Index out of range.
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// Vector/matrix dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The QoS rate target cannot be met even at full power.
    #[error("QoS infeasible at slot {slot}: {detail}")]
    QosInfeasible { slot: usize, detail: String },

    /// The payload cannot be delivered even with every slot active.
    #[error("payload infeasible: {0}")]
    PayloadInfeasible(String),

    /// A linearization point is unusable (e.g. nonpositive denominator).
    #[error("invalid linearization: {0}")]
    InvalidLinearization(String),

    /// The convex subproblem solver failed.
    #[error("solver failure: {0}")]
    Solver(String),

    /// The weather model produced a nonphysical value.
    #[error("invalid weather: {0}")]
    InvalidWeather(String),

    /// Cross-module state is internally inconsistent.
    #[error("inconsistent state at slot {slot}: {detail}")]
    Inconsistent { slot: usize, detail: String },

    /// A planned trajectory failed the exact collision check.
    #[error("collision at step {step} between {a} and {b}")]
    Collision { step: usize, a: String, b: String },

    /// The iterate diverged (loss increased for several consecutive rounds).
    #[error("step size too large: {0}")]
    StepSize(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
