//! Monte Carlo laboratory for infinite-horizon forward-backward stochastic
//! Volterra systems with delay and jumps.
//!
//! The pipeline runs forward simulation, a Picard solver for the backward
//! Volterra equation, the adjoint system, and a maximum-principle optimizer.
//! Conditional expectations are estimated by cross-sectional least squares.

pub mod adjoint;
pub mod bsvie;
pub mod cli;
pub mod control;
pub mod drivers;
pub mod error;
pub mod field;
pub mod forward;
pub mod models;
pub mod par;
pub mod paths;
pub mod regression;

pub use error::{Error, Result};
