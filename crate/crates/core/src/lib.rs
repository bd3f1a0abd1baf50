//! Sparse Gaussian process approximation with certified error bounds.

pub mod data;
pub mod divergences;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod pf;
pub mod sparse;

pub use error::{Error, Result};
