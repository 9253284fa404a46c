pub mod adaptive;
pub mod bounds;
pub mod cli;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod spectral;

pub use error::{Error, Result};
