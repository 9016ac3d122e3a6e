//! Deterministic world simulation: device population, epoch clock, network,
//! adversary corruption, Monte Carlo experiments and scripted scenarios.
//!
//! Everything random flows from one `ChaCha20Rng` seeded by
//! [`WorldConfig::seed`], and every collection that is iterated for output is
//! ordered, so equal configs give byte-identical transcripts.

pub mod config;
pub mod montecarlo;
pub mod network;
pub mod scenarios;
pub mod world;

use serde::Serialize;
use thiserror::Error;

pub use config::{ConfigError, WorldConfig};
pub use montecarlo::{monte_carlo_unlock_without_honest, Estimate};
pub use network::{Endpoint, Envelope, Network};
pub use scenarios::{run_scenario, ScenarioReport, SCENARIOS};
pub use world::{
    AdversaryOutcome, EpochReport, Keyring, SimDevice, UnlockOutcome, UnlockPlan, World,
};

use crate::crypto::CryptoError;
use crate::custodian::Refusal;
use crate::device::{DeviceError, UnlockRejection};
use crate::lawenforcement::CaseError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Custodian(#[from] Refusal),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Unlock(#[from] UnlockRejection),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
}

/// JSON-lines event log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    lines: Vec<String>,
}

impl Transcript {
    pub fn record<T: Serialize + ?Sized>(&mut self, event: &T) {
        self.lines
            .push(serde_json::to_string(event).expect("transcript events serialize"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}
