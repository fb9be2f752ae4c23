//! Joint optimization of per-frame depth and a neural scene-flow field
//! from monocular video, optical flow and camera poses.

pub mod autodiff;
pub mod conditioning;
pub mod dataset;
pub mod depth;
pub mod error;
pub mod flow;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod parallel;
pub mod raster;
pub mod sceneflow;
pub mod sequence;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
