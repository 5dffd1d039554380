//! Geometry-aware multi-task representation learning on the Stiefel manifold.

pub mod baselines;
pub mod error;
pub mod har;
pub mod harness;
pub mod manifold;
pub mod objective;
pub mod solver;
pub mod synthdata;

pub use error::{GeoErmError, Result};
