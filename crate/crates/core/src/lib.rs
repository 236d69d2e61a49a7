//! Stochastic Volterra equations: simulation, neural SVE models and their
//! baselines, training, and coupled-perturbation stability scans.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod model;
pub mod neural_sve;
pub mod nn;
pub mod paths;
pub mod stability;
pub mod sve;

pub use error::{Error, Result};
