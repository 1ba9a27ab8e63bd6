//! Traffic-aware beam selection for cell-free mmWave uplink.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`]: geometry, dual-timescale multipath channels, codebooks
//! - [`phy`]: analog/digital combining, SINR, rates
//! - [`traffic`]: arrivals, queues, delay-satisfaction metrics
//! - [`beamspace`]: beam sweeps, the wide-to-narrow strength predictor and
//!   action-space pruning
//! - [`agents`]: replay, exploration and the Q-learning family (dueling
//!   double-Q, double-Q, monotone mixing)
//! - [`schedulers`]: queue-weighted (Lyapunov) selectors and references
//! - [`sim`]: the episode environment, training loops and evaluation

pub mod agents;
pub mod beamspace;
pub mod channel;
pub mod config;
pub mod phy;
pub mod rng;
pub mod schedulers;
pub mod sim;
pub mod traffic;

pub use config::ScenarioConfig;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("degenerate channel: {0}")]
    Degenerate(String),
    #[error("infeasible action space: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Network(#[from] cfbeam_nn::NnError),
}
