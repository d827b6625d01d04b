//! Exact tabular tools for delayed-specification assistance games.
//!
//! * [`mdp`]: finite MDPs, policy evaluation and policy iteration.
//! * [`reward`]: reward distributions, average optimal value and POWER.
//! * [`assistance`]: switch-policy values, the reward/POWER decomposition,
//!   stationary surrogates and the delayed specification score.
//! * [`aup`]: the attainable-utility-preservation penalty and agent training.
//! * [`gridworld`]: the Options and Damage environments.
//! * [`experiment`]: configuration, scoring runs and residual reports.
//! * [`verify`]: randomized numerical checks of the identities above.

pub mod assistance;
pub mod aup;
pub mod error;
pub mod experiment;
pub mod gridworld;
pub mod mdp;
pub mod reward;
pub mod verify;

pub use error::{Error, Result};
