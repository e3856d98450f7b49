//! Iterative flow matching between point clouds.
//!
//! A velocity field is learned by Gaussian RBF interpolation of straight-line
//! homotopy data between a start cloud and a target cloud, then used to
//! transport samples by explicit ODE integration. Two refinement drivers
//! repeat the process from the transported samples: end-path correction and
//! gradual refinement over checkpoints. Progress is measured with the
//! symmetric closest-point transport cost.

pub mod cg;
pub mod error;
pub mod flowmatch;
pub mod io;
pub mod metrics;
pub mod ode;
pub mod pointcloud;
pub mod rbf;
pub mod refine;
pub mod sampling;

pub use error::{Error, Result};
pub use pointcloud::PointCloud;
pub use sampling::Seed;
