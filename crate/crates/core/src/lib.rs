//! TD3 with pluggable generative enhancements on a near-field UAV relay
//! environment, plus exact baselines and an experiment harness.

pub mod env;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod par;
pub mod plugins;
pub mod rl;

pub use error::{Error, Result, Violation};
