//! Fisher-market and first-price pacing equilibria, with bootstrap inference
//! on the equilibrium pacing multipliers.

pub mod asymptotics;
pub mod bootstrap;
pub mod cli;
pub mod conf_region;
pub mod error;
pub mod generator;
pub mod harness;
pub mod linalg;
pub mod market;
pub mod resampling;
pub mod rng;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
