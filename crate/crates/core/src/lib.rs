//! Multi-agent reinforcement learning for adaptive mesh refinement of
//! hyperbolic conservation laws solved with a discontinuous Galerkin method.

pub mod dg;
pub mod env;
pub mod equations;
pub mod error;
pub mod estimators;
pub mod mesh;
pub mod metrics;
pub mod policies;
pub mod problems;
pub mod trainer;
pub mod vtk;

pub use error::{Error, Result};
