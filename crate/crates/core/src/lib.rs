//! Mixed Brownian / fractional Brownian stochastic control toolkit.

pub mod adjoint;
pub mod cli;
pub mod error;
pub mod fbm;
pub mod linalg;
pub mod lq;
pub mod quad;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod transforms;

pub use error::{Error, Result};
