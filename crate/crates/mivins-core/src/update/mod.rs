//! EKF update machinery: temporal state augmentation (cloning at the true
//! imaging time), multi-IMU rigid-body constraint updates, feature
//! triangulation, MSCKF nullspace updates through on-manifold interpolation,
//! and SLAM feature updates with delayed initialization.

mod augment;
mod constraints;
mod triangulation;
mod visual;

pub use augment::augment_clone;
pub use constraints::{imu_constraint_update, ConstraintOutcome};
pub use triangulation::{triangulate_views, TriangulationError, View};
pub use visual::{
    msckf_update, slam_init, slam_update, FeatureTrack, ResidualMode, SlamInitError,
    VisualContext, VisualOutcome,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::HashMap;
use std::sync::Mutex;

use crate::camera::RsTimeReference;

/// Tunables shared by all update paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateConfig {
    /// On-manifold interpolation order (1 = linear).
    pub interp_order: usize,
    /// Pixel measurement standard deviation (px).
    pub pixel_sigma: f64,
    /// Inflate auxiliary-camera pixel noise by this factor during the first
    /// `warmup_s` seconds of the run.
    pub aux_cam_inflation: f64,
    /// Rigid multi-IMU constraint noise after warm-up.
    pub constraint_sigma: f64,
    /// Constraint noise inflation during warm-up.
    pub constraint_inflation: f64,
    pub warmup_s: f64,
    /// Per-track / per-constraint gating level (chi-square CDF).
    pub chi2_level: f64,
    /// Maximum number of SLAM features held in the state.
    pub slam_cap: usize,
    /// Minimum subtended angle across a track for triangulation (deg).
    pub parallax_min_deg: f64,
    pub residual_mode: ResidualMode,
    pub rs_reference: RsTimeReference,
    /// Gravity magnitude for re-integration residuals (m/s^2).
    pub gravity: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            interp_order: 3,
            pixel_sigma: 1.0,
            aux_cam_inflation: 10.0,
            constraint_sigma: 0.005,
            constraint_inflation: 100.0,
            warmup_s: 5.0,
            chi2_level: 0.95,
            slam_cap: 0,
            parallax_min_deg: 1.0,
            residual_mode: ResidualMode::Reintegrate,
            rs_reference: RsTimeReference::StartOfImage,
            gravity: crate::propagation::GRAVITY_DEFAULT,
        }
    }
}

impl UpdateConfig {
    /// Effective pixel sigma for a camera at run time `t` (seconds since the
    /// first update).
    pub fn pixel_sigma_for(&self, is_base_cam: bool, t_run: f64) -> f64 {
        if !is_base_cam && t_run < self.warmup_s {
            self.pixel_sigma * self.aux_cam_inflation
        } else {
            self.pixel_sigma
        }
    }

    pub fn constraint_sigma_for(&self, t_run: f64) -> f64 {
        if t_run < self.warmup_s {
            self.constraint_sigma * self.constraint_inflation
        } else {
            self.constraint_sigma
        }
    }
}

static CHI2_CACHE: Mutex<Option<HashMap<(usize, u64), f64>>> = Mutex::new(None);

/// Upper-tail chi-square gate threshold, cached per (dof, level).
pub fn chi2_threshold(dof: usize, level: f64) -> f64 {
    let key = (dof, level.to_bits());
    let mut guard = CHI2_CACHE.lock().unwrap();
    let cache = guard.get_or_insert_with(HashMap::new);
    if let Some(v) = cache.get(&key) {
        return *v;
    }
    let v = ChiSquared::new(dof as f64)
        .map(|d| d.inverse_cdf(level))
        .unwrap_or(f64::INFINITY);
    cache.insert(key, v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_thresholds_match_table_values() {
        // standard 0.95 quantiles
        assert!((chi2_threshold(1, 0.95) - 3.841).abs() < 0.01);
        assert!((chi2_threshold(2, 0.95) - 5.991).abs() < 0.01);
        assert!((chi2_threshold(6, 0.95) - 12.592).abs() < 0.01);
    }

    #[test]
    fn noise_schedules() {
        let cfg = UpdateConfig::default();
        assert_eq!(cfg.pixel_sigma_for(true, 1.0), 1.0);
        assert_eq!(cfg.pixel_sigma_for(false, 1.0), 10.0);
        assert_eq!(cfg.pixel_sigma_for(false, 6.0), 1.0);
        assert_eq!(cfg.constraint_sigma_for(1.0), 0.5);
        assert_eq!(cfg.constraint_sigma_for(5.5), 0.005);
    }
}
