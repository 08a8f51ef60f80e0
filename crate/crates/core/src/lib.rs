//! Version-age-of-information scheduling with diffusion and distributional
//! soft actor-critic learners.

pub mod actor;
pub mod agents;
pub mod critics;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod oracles;

pub use error::{Error, Result};
