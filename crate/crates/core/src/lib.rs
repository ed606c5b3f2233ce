//! Rank-one matrix estimation in Gaussian noise by alternating scalar
//! denoising, with a deterministic state-evolution predictor and a Monte
//! Carlo harness for checking one against the other.

pub mod cli;
pub mod config;
pub mod error;
pub mod iterfac;
pub mod model;
pub mod montecarlo;
pub mod quadrature;
pub mod selection;
pub mod selfcheck;
pub mod special;
pub mod state_evolution;

pub use error::{Error, Result};
