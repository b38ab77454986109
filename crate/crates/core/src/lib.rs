//! Simulation and verification toolkit for the one-dimensional hyperbolic Anderson model
//! driven by Lévy colored noise.

pub mod chaos_combinatorics;
pub mod cli;
pub mod error;
pub mod kernels;
pub mod levy_noise;
pub mod malliavin;
pub mod quad;
pub mod report;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
