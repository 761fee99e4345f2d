//! Pseudospectral simulation and diagnostics for the parabolic-parabolic
//! Keller-Segel system with logistic source on a periodic box.

pub mod error;
pub mod checkpoint;
pub mod cli;
pub mod dyadic;
pub mod fields;
pub mod monitors;
pub mod norms;
pub mod solver;

pub use error::{KslbError, Result};
