//! Targetless LiDAR-camera extrinsic calibration.
//!
//! Depth-continuous 3D edges (intersections of fitted planes) are extracted from a
//! point cloud, matched against image edge pixels, and the extrinsic is solved by
//! weighted Gauss-Newton on SE(3) using a per-point LiDAR/pixel noise model. The
//! result carries the 6×6 covariance of the calibrated extrinsic.

pub mod error;
pub mod calibrate;
pub mod correspondence;
pub mod geometry;
pub mod image_edge;
pub mod lidar_edge;
pub mod noise;
pub mod sim;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
pub use geometry::{BearingVector, CameraIntrinsics, RigidTransform, TwistIncrement};
