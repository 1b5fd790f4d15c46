//! Kinetic and measure-valued flows with derivative and change-of-measure checks.

pub mod error;
pub mod grid;
pub mod knudsen;
pub mod collision;
pub mod boltzmann;
pub mod frechet;
pub mod spectral;
pub mod quasi_invariance;

pub use error::{Error, Result};
