use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("liquidity exceeded: requested {requested}, available {available}")]
    LiquidityExceeded { requested: f64, available: f64 },

    #[error("infeasible state: {0}")]
    InfeasibleState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("io error: {0}")]
    Io(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("simulation fault at step {step}: {reason}")]
    SimulationFault { step: usize, reason: String },

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted { epoch: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;
