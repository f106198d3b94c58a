//! Run configuration: a single TOML file describing the scenario, the
//! sensor roster, estimator options, and outputs. Unknown keys are rejected
//! and the whole config is validated before any run starts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::camera::RsTimeReference;
use crate::estimator::EstimatorConfig;
use crate::propagation::NoiseSpec;
use crate::simulator::{AnalyticTrajectory, CalibPriors, SimConfig};
use crate::update::{ResidualMode, UpdateConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub estimator: EstimatorOptions,
    /// Number of Monte-Carlo runs.
    pub runs: usize,
    /// Base seed; run `i` uses `seed + i`.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioConfig::default(),
            estimator: EstimatorOptions::default(),
            runs: 1,
            seed: 42,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// `figure_eight`, `figure_eight_fast`, or `spiral`; ignored when
    /// `pose_file` is given.
    pub trajectory: String,
    /// External uniformly-sampled pose file (ground-truth format).
    pub pose_file: Option<PathBuf>,
    pub duration: f64,
    /// Scales the built-in trajectory's position amplitudes.
    pub scale: f64,
    /// Hold the start pose for this long (s), e.g. for static init.
    pub hold_start: f64,
    pub imus: usize,
    pub cams: usize,
    pub features_per_cam: usize,
    /// Rolling-shutter readout applied to every camera (s); 0 = global.
    pub readout: f64,
    pub pixel_noise: f64,
    pub noiseless: bool,
    pub imu_noise: NoiseSpec,
    pub priors: PriorOptions,
    /// Start the readout estimate at zero (the readout-calibration
    /// convergence protocol).
    pub readout_init_zero: bool,
    /// Scripted failures: (time in base-IMU clock, sensor name).
    pub failures: Vec<(f64, String)>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            trajectory: "figure_eight".into(),
            pose_file: None,
            duration: 60.0,
            scale: 1.0,
            hold_start: 0.0,
            imus: 1,
            cams: 1,
            features_per_cam: 25,
            readout: 0.0,
            pixel_noise: 1.0,
            noiseless: false,
            imu_noise: NoiseSpec::default(),
            priors: PriorOptions::default(),
            readout_init_zero: false,
            failures: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PriorOptions {
    pub rot: f64,
    pub pos: f64,
    pub time_offset: f64,
    pub readout: f64,
    pub proj: f64,
    pub dist: f64,
    pub bias_turnon: f64,
}

impl Default for PriorOptions {
    fn default() -> Self {
        let p = CalibPriors::default();
        PriorOptions {
            rot: p.rot,
            pos: p.pos,
            time_offset: p.time_offset,
            readout: p.readout,
            proj: p.proj,
            dist: p.dist,
            bias_turnon: p.bias_turnon,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Initialize from the log's truth records (simulation protocol).
    Truth,
    /// Stationary start: gravity from the base accelerometer, zero
    /// velocities, zero yaw/position.
    Static,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOptions {
    pub window_size: usize,
    pub interp_order: usize,
    pub fej: bool,
    pub slam_cap: usize,
    pub pixel_sigma: f64,
    pub constraint_sigma: f64,
    pub constraint_inflation: f64,
    pub aux_cam_inflation: f64,
    pub warmup_s: f64,
    pub chi2_level: f64,
    pub residual_mode: ResidualMode,
    pub init: InitMode,
    /// Estimate the rolling-shutter readout online; when false the readout
    /// entry is pinned at its initial value (zero prior).
    pub calibrate_readout: bool,
    pub failure_timeout: f64,
    pub gravity: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        let u = UpdateConfig::default();
        EstimatorOptions {
            window_size: 10,
            interp_order: u.interp_order,
            fej: true,
            slam_cap: u.slam_cap,
            pixel_sigma: u.pixel_sigma,
            constraint_sigma: u.constraint_sigma,
            constraint_inflation: u.constraint_inflation,
            aux_cam_inflation: u.aux_cam_inflation,
            warmup_s: u.warmup_s,
            chi2_level: u.chi2_level,
            residual_mode: u.residual_mode,
            init: InitMode::Truth,
            calibrate_readout: true,
            failure_timeout: 0.5,
            gravity: crate::propagation::GRAVITY_DEFAULT,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        let e = &self.estimator;
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !matches!(
            s.trajectory.as_str(),
            "figure_eight" | "figure_eight_fast" | "spiral"
        ) && s.pose_file.is_none()
        {
            return fail("trajectory must be figure_eight|figure_eight_fast|spiral or pose_file set");
        }
        if s.duration <= 1.0 {
            return fail("duration must exceed 1 s");
        }
        if s.imus == 0 || s.imus > 6 || s.cams == 0 || s.cams > 6 {
            return fail("imus and cams must be in 1..=6");
        }
        if s.features_per_cam == 0 {
            return fail("features_per_cam must be positive");
        }
        if !(s.readout >= 0.0 && s.readout < 0.1) {
            return fail("readout must be in [0, 0.1)");
        }
        if !s.imu_noise.validate() {
            return fail("imu noise densities must be positive");
        }
        if e.window_size < 4 {
            return fail("window_size must be at least 4");
        }
        if e.interp_order == 0 || e.interp_order >= e.window_size {
            return fail("interp_order must be in 1..window_size");
        }
        if !(0.5..1.0).contains(&e.chi2_level) {
            return fail("chi2_level must be in [0.5, 1)");
        }
        if self.runs == 0 {
            return fail("runs must be at least 1");
        }
        for (t, sensor) in &s.failures {
            if *t < 0.0 || *t > s.duration {
                return fail("failure time outside the run");
            }
            let ok = sensor
                .strip_prefix("imu")
                .or_else(|| sensor.strip_prefix("cam"))
                .map(|n| n.parse::<usize>().is_ok())
                .unwrap_or(false);
            if !ok {
                return fail("failure sensor must be imuK or camK");
            }
        }
        Ok(())
    }

    pub fn trajectory(&self) -> AnalyticTrajectory {
        let mut t = match self.scenario.trajectory.as_str() {
            "figure_eight_fast" => AnalyticTrajectory::figure_eight_fast(),
            "spiral" => AnalyticTrajectory::spiral(),
            _ => AnalyticTrajectory::figure_eight(),
        };
        for a in t.amp.iter_mut() {
            *a *= self.scenario.scale;
        }
        t.hold_start = self.scenario.hold_start;
        t
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.scenario;
        let mut sim = SimConfig::default_scenario(s.imus, s.cams);
        sim.trajectory = self.trajectory();
        sim.duration = s.duration;
        for cam in sim.cams.iter_mut() {
            cam.intr.readout = s.readout;
            cam.target_features = s.features_per_cam;
        }
        sim.imu_noise = s.imu_noise;
        sim.pixel_noise = s.pixel_noise;
        sim.noiseless = s.noiseless;
        sim.priors = CalibPriors {
            rot: s.priors.rot,
            pos: s.priors.pos,
            time_offset: s.priors.time_offset,
            readout: s.priors.readout,
            proj: s.priors.proj,
            dist: s.priors.dist,
            bias_turnon: s.priors.bias_turnon,
        };
        sim.readout_init_zero = s.readout_init_zero;
        sim.failures = s.failures.clone();
        sim
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        let e = &self.estimator;
        EstimatorConfig {
            window_size: e.window_size,
            update: UpdateConfig {
                interp_order: e.interp_order,
                pixel_sigma: e.pixel_sigma,
                aux_cam_inflation: e.aux_cam_inflation,
                constraint_sigma: e.constraint_sigma,
                constraint_inflation: e.constraint_inflation,
                warmup_s: e.warmup_s,
                chi2_level: e.chi2_level,
                slam_cap: e.slam_cap,
                parallax_min_deg: 1.0,
                residual_mode: e.residual_mode,
                rs_reference: RsTimeReference::StartOfImage,
                gravity: e.gravity,
            },
            imu_noise: self.scenario.imu_noise,
            gravity: e.gravity,
            fej: e.fej,
            failure_timeout: e.failure_timeout,
            msckf_min_obs: 3,
            slam_lost_timeout: 2.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = "runs = 1\n[scenario]\nbananas = 3\n";
        assert!(RunConfig::from_toml_str(s).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.scenario.imus = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.estimator.interp_order = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.scenario.failures.push((5.0, "radar0".into()));
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.scenario.failures.push((5.0, "imu1".into()));
        assert!(cfg.validate().is_ok());
    }
}
