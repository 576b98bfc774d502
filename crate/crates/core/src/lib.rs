//! Nonparametric solver for the probabilistic Lambert problem with process
//! noise, posed as a Schrödinger bridge between two endpoint densities.

pub mod bridge;
pub mod error;
pub mod grid;
pub mod lambert;
pub mod potential;
pub mod propagator;
pub mod recovery;

pub use error::{Error, Result};
