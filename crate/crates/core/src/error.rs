use thiserror::Error;

use crate::simulators::SimulationError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("proposal acceptance {accepted}/{drawn} below threshold; posterior escaped prior support")]
    ProposalEscaped { accepted: usize, drawn: usize },

    #[error("value outside prior support: {0}")]
    OutsideSupport(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simulation failed: {0}")]
    Simulation(#[from] SimulationError),

    #[error("unsupported schema version {found} for {what} (expected {expected})")]
    SchemaVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
