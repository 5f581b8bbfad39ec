//! Simulation-based inversion of a neural emulator.
//!
//! Stimuli are generated from a six-dimensional latent score vector, passed
//! through a (synthetic) brain emulator, compressed by a summary backbone,
//! and inverted with a conditional flow-matching posterior. The diagnostics
//! module measures recovery and calibration.

pub mod diagnostics;
pub mod emulator;
pub mod error;
pub mod flow;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod stimulus;
pub mod summary;
pub mod trainer;
pub mod workflow;

pub use error::{Error, Result};
