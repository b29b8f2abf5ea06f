//! Simulation and training toolkit for additive two-tower click models.

pub mod clicks;
pub mod corpus;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod policy;
pub mod report;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
