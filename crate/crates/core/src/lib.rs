//! Camera models and intrinsic calibration for the unified camera model family.
//!
//! - [`geometry`]: points, pixels and SE(3) poses.
//! - [`camera`]: pinhole, UCM, EUCM and double-sphere projection/unprojection
//!   with analytic Jacobians.
//! - [`optim`]: Levenberg–Marquardt and step-decayed first-order descent.
//! - [`calib`]: target-based calibration, pose-only refits, reprojection
//!   error and the perturbation harness.
//! - [`synth`]: synthetic scenes, view-synthesis warping, photometric
//!   self-calibration, rectification and point clouds.

pub mod calib;
pub mod camera;
pub mod geometry;
pub mod optim;
pub mod raster;
pub mod synth;

pub use camera::{CameraError, CameraModel, ModelKind, ProjectionJacobians};
pub use geometry::{Pixel, Point3, PoseSE3, Twist};
