//! Weakly-supervised multi-view 2D-to-3D human pose lifting.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the command-line tool uses.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod net;
pub mod optim;
pub mod pose;
pub mod scalar;
pub mod skeleton;
pub mod trainer;
pub mod triangulate;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Camera = geometry::CameraParams<f64>;
pub type Frame = dataio::MultiViewFrame<f64>;
pub type View = dataio::View<f64>;
pub type Params = net::MlpParams<f64>;
pub type Stats = pose::NormStats<f64>;
