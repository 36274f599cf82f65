//! Up-to-scale linear velocity of an event camera with known angular
//! velocity, from clusters of events triggered by straight 3D edges.

pub mod clustering;
pub mod constraint;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linefit;
pub mod refine;
pub mod solver;
pub mod synth;

#[cfg(test)]
mod test_support;

pub use error::{CelcError, Result};
