use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown bus id {0}")]
    UnknownBus(usize),

    #[error("phase {phase} not present at bus {bus}")]
    PhaseNotAtBus {
        bus: usize,
        phase: crate::network::Phase,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("power flow did not converge in {sweeps} sweeps (mismatch {mismatch:e} p.u.)")]
    SweepDiverged { sweeps: usize, mismatch: f64 },

    #[error("zero voltage encountered at bus {bus}, phase {phase}")]
    ZeroVoltage {
        bus: usize,
        phase: crate::network::Phase,
    },

    #[error("infeasible feeder spec: {0}")]
    Spec(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) | Error::Validation(_) | Error::UnknownBus(_) => "validation",
            Error::PhaseNotAtBus { .. } | Error::Partition(_) | Error::Spec(_) => "validation",
            Error::Dimension { .. } => "dimension",
            Error::SweepDiverged { .. } | Error::ZeroVoltage { .. } => "powerflow",
            Error::Io(_) => "io",
        }
    }
}
