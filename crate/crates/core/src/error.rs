use thiserror::Error;

use crate::scenario::Violation;

/// Errors raised by the simulator and its analysis helpers.
#[derive(Debug, Error)]
pub enum SimError {
    /// An operation was invoked in a state or protocol variant that does not allow it.
    #[error("protocol misuse: {0}")]
    ProtocolMisuse(String),

    /// CPR 30:2 counters received an event out of sequence.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// A precondition on an argument did not hold.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// The engine found its own state inconsistent; the run is aborted.
    #[error("simulation integrity fault at tick {tick}: {detail}")]
    Integrity { tick: u32, detail: String },

    /// The scenario failed validation.
    #[error("scenario has {} violation(s)", .0.len())]
    InvalidScenario(Vec<Violation>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
