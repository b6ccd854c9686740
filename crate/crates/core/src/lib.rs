//! Deterministic, seedable simulator of an Advanced Life Support team
//! resuscitating a patient, built to compare spoken communication protocols.
//!
//! A run is a pure function of `(ScenarioConfig, seed)`:
//!
//! ```
//! use alsim::{run, ScenarioConfig};
//!
//! let sc = ScenarioConfig::default();
//! let a = run(&sc, 42, true).unwrap();
//! let b = run(&sc, 42, true).unwrap();
//! assert_eq!(a.events, b.events);
//! assert!(a.result.no_flow_seconds <= a.result.total_seconds);
//! ```

pub mod agents;
pub mod als;
pub mod batch;
pub mod comms;
pub mod domain;
pub mod engine;
pub mod error;
pub mod events;
pub mod metrics;
pub mod scenario;

pub use batch::{monte_carlo, Batch, BatchSummary};
pub use comms::{Performative, ProtocolVariant};
pub use engine::{run, update_patient, RunOutcome, RunOutput, RunResult, World};
pub use error::{Result, SimError};
pub use events::{Event, EventType};
pub use scenario::{validate_scenario, ScenarioConfig, Violation};
