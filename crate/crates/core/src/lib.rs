//! Random periodic orbits, time-periodic measures and linear response for
//! dissipative SDEs with τ-periodic coefficients.

pub mod cli;
pub mod dissipativity;
pub mod error;
pub mod integrate;
pub mod measure;
pub mod model;
pub mod noise;
pub mod pullback;
pub mod response;
pub mod stats;

pub use error::{Error, Result};
