//! Multi-IMU multi-camera visual-inertial estimation.
//!
//! An MSCKF-style error-state Kalman filter that fuses an arbitrary number of
//! asynchronous, uncalibrated IMUs and (rolling-shutter) cameras, with online
//! spatiotemporal and intrinsic calibration, first-estimates-Jacobian
//! consistency, and base-sensor switching on failure. The crate also ships a
//! continuous-time B-spline simulator and a Monte-Carlo evaluation harness.

pub mod camera;
pub mod config;
pub mod estimator;
pub mod evaluation;
pub mod interpolation;
pub mod io;
pub mod manifold;
pub mod propagation;
pub mod resilience;
pub mod runner;
pub mod simulator;
pub mod state;
pub mod update;

pub use manifold::{Mat3, Rotation, Vec3};

/// A rigid pose: rotation mapping global-frame vectors into the local frame
/// (`q_LG` in the module conventions) and the local origin in global
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Rotation,
    pub pos: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rot: Rotation::identity(),
            pos: Vec3::zeros(),
        }
    }

    pub fn new(rot: Rotation, pos: Vec3) -> Self {
        Pose { rot, pos }
    }
}
