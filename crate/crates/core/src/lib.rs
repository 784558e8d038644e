//! Differentiable reconstruction of mesh geometry, mesh-anchored Gaussian
//! appearance, camera extrinsics and robot joint angles from multi-view RGB.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod kinematics;
pub mod losses;
pub mod optim;
pub mod ply;
pub mod raster;
pub mod scene_io;
pub mod sh;
pub mod so3;
pub mod splatmesh;

pub use error::{Error, Result};
