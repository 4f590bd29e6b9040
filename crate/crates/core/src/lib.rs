//! Latency races behind exchange speed bumps.
//!
//! Traders pay to speed up their orders and race each other, and a
//! cancelling market maker, to a stale quote. This crate provides:
//!
//! - [`model`]: the speed-technology curve and market parameters,
//! - [`analytics`]: exact and published execution probabilities,
//! - [`race`]: seeded Monte Carlo simulation of single races,
//! - [`equilibrium`]: best responses and symmetric Nash equilibria,
//! - [`session`]: the 32-round lab protocol with simulated agents,
//! - [`econometrics`]: fixed-effects panel OLS with multi-way clustering,
//! - [`verify`]: oracle cross-checks of all of the above.

pub mod analytics;
pub mod econometrics;
pub mod equilibrium;
pub mod error;
pub mod exec;
pub mod model;
pub mod optimize;
pub mod race;
pub mod session;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Execution;
