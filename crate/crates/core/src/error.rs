use thiserror::Error;

/// Errors raised by the simulator and the verification harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PasgError {
    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite gradient on machine {machine} at step {step}")]
    StepFailure { machine: usize, step: u64 },

    #[error("invalid allocation: {0}")]
    Allocation(String),

    #[error("empty worker list")]
    EmptyWorkers,

    #[error("machine {machine} shrank from {previous} to {updated} samples")]
    CountDecreased {
        machine: usize,
        previous: u64,
        updated: u64,
    },

    #[error("spectral oracle failure: {0}")]
    OracleFailure(String),

    #[error("harness precondition violated: {0}")]
    Harness(String),

    #[error("replication {replication} failed: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<PasgError>,
    },
}

pub type Result<T> = std::result::Result<T, PasgError>;
