//! The filter loop: event ingestion, per-frame propagation to offset-aware
//! target times, temporal cloning, inertial and visual updates, failure
//! handling, and snapshot logging.
//!
//! One step runs per base-camera frame (or per synthetic clone tick after a
//! base-camera failure):
//!
//! 1. detect sensor failures (timeout or sample-gap) and handle them,
//! 2. propagate every alive IMU to the estimated image time in its clock,
//! 3. clone the base pose at the true imaging time,
//! 4. apply the multi-IMU rigid constraints,
//! 5. ingest camera frames whose mapped times are covered by the window,
//! 6. run MSCKF/SLAM visual updates,
//! 7. publish a snapshot in the `{I0}` frame.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::camera::Vec2;
use crate::manifold::Vec3;
use crate::propagation::{extract_window, propagate_joint, sample_at, NoiseSpec, PropagationError};
use crate::resilience::{
    handle_failure, output_pose_in_i0, FailureAction, Mat6, OutputFrameLink, ResilienceError,
    SensorHealth, SensorId,
};
use crate::state::{CalibrationBlock, CamId, EntryKey, FeatureId, FullState, ImuId};
use crate::update::{
    self, augment_clone, imu_constraint_update, msckf_update, slam_init, slam_update,
    FeatureTrack, UpdateConfig,
};
use crate::Pose;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Sliding-window size (number of base-pose clones).
    pub window_size: usize,
    pub update: UpdateConfig,
    pub imu_noise: NoiseSpec,
    pub gravity: f64,
    pub fej: bool,
    /// Seconds without samples before a sensor is declared failed.
    pub failure_timeout: f64,
    /// Minimum usable observations for an MSCKF track.
    pub msckf_min_obs: usize,
    /// Marginalize a SLAM feature unseen for this long (s).
    pub slam_lost_timeout: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            window_size: 10,
            update: UpdateConfig::default(),
            imu_noise: NoiseSpec::default(),
            gravity: crate::propagation::GRAVITY_DEFAULT,
            fej: true,
            failure_timeout: 0.5,
            msckf_min_obs: 3,
            slam_lost_timeout: 2.0,
        }
    }
}

/// One published estimate: the `{I0}`-frame pose with covariance plus the
/// current calibration estimates and their marginal sigmas.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Base-camera nominal stamp of the driving frame.
    pub t_cam: f64,
    /// Estimated base-IMU-clock time of the pose.
    pub t_imu_est: f64,
    pub pose: Pose,
    pub cov: Mat6,
    pub vel: Vec3,
    pub calib: CalibrationBlock,
    pub calib_sigma: Vec<(EntryKey, Vec<f64>)>,
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub steps: usize,
    pub msckf_tracks_used: usize,
    pub msckf_tracks_gated: usize,
    pub msckf_tracks_failed: usize,
    pub constraints_applied: usize,
    pub constraints_gated: usize,
    pub slam_inits: usize,
    pub slam_updates: usize,
    pub failures_handled: Vec<(f64, String)>,
    pub base_switches: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Resilience(#[from] ResilienceError),
    #[error(transparent)]
    State(#[from] crate::state::StateError),
}

#[derive(Debug, Clone)]
struct Track {
    obs: Vec<(f64, Vec2)>,
    /// Set when the feature left the camera's view.
    done: bool,
}

pub struct Estimator {
    pub state: FullState,
    pub cfg: EstimatorConfig,
    pub health: SensorHealth,
    pub link: OutputFrameLink,
    pub stats: RunStats,
    pub snapshots: Vec<Snapshot>,
    imu_buffers: BTreeMap<ImuId, Vec<ImuSample2>>,
    imu_rates: BTreeMap<ImuId, f64>,
    cam_rates: BTreeMap<CamId, f64>,
    /// Auxiliary frames waiting for their mapped time to be covered.
    aux_frames: VecDeque<(CamId, f64, Vec<(FeatureId, Vec2)>)>,
    /// Base frames waiting for IMU coverage.
    pending_steps: VecDeque<(f64, Vec<(FeatureId, Vec2)>)>,
    tracks: HashMap<(CamId, FeatureId), Track>,
    slam_obs: HashMap<FeatureId, Vec<(CamId, f64, Vec2)>>,
    slam_last_seen: HashMap<FeatureId, f64>,
    t_first_step: Option<f64>,
    last_base_frame: Option<f64>,
    /// (next stamp, period): synthetic cloning after base-camera failure.
    synthetic: Option<(f64, f64)>,
}

type ImuSample2 = crate::propagation::ImuSample;

impl Estimator {
    /// `state` must be fully initialized (see the runner's init modes);
    /// `imu_rates`/`cam_rates` are the nominal sensor rates used for gap and
    /// timeout policies.
    pub fn new(
        state: FullState,
        cfg: EstimatorConfig,
        imu_rates: BTreeMap<ImuId, f64>,
        cam_rates: BTreeMap<CamId, f64>,
    ) -> Self {
        Estimator {
            state,
            cfg,
            health: SensorHealth::default(),
            link: OutputFrameLink::default(),
            stats: RunStats::default(),
            snapshots: Vec::new(),
            imu_buffers: BTreeMap::new(),
            imu_rates,
            cam_rates,
            aux_frames: VecDeque::new(),
            pending_steps: VecDeque::new(),
            tracks: HashMap::new(),
            slam_obs: HashMap::new(),
            slam_last_seen: HashMap::new(),
            t_first_step: None,
            last_base_frame: None,
            synthetic: None,
        }
    }

    /// Map a sensor-clock stamp to the base-IMU clock with current offset
    /// estimates.
    fn to_base_imu_clock(&self, sensor: SensorId, stamp: f64) -> f64 {
        match sensor {
            SensorId::Imu(id) => {
                if id == self.state.base_imu {
                    stamp
                } else {
                    self.state
                        .calib
                        .imu
                        .get(&id)
                        .map(|c| stamp - c.time_offset)
                        .unwrap_or(stamp)
                }
            }
            SensorId::Cam(id) => {
                let base_off = self
                    .state
                    .calib
                    .cam
                    .get(&self.state.base_cam)
                    .map(|c| c.time_offset)
                    .unwrap_or(0.0);
                if id == self.state.base_cam {
                    stamp + base_off
                } else {
                    let cam_off = self
                        .state
                        .calib
                        .cam
                        .get(&id)
                        .map(|c| c.time_offset)
                        .unwrap_or(0.0);
                    stamp + cam_off + base_off
                }
            }
        }
    }

    pub fn handle_imu(&mut self, id: ImuId, sample: ImuSample2) -> Result<(), EstimatorError> {
        if self.health.is_failed(SensorId::Imu(id)) || !self.state.imus.contains_key(&id) {
            return Ok(());
        }
        let t_ib = self.to_base_imu_clock(SensorId::Imu(id), sample.stamp);
        self.health.note_sample(SensorId::Imu(id), t_ib);
        self.imu_buffers.entry(id).or_default().push(sample);
        // retry pending work now that coverage advanced
        self.drain_ready()?;
        self.poll_synthetic(t_ib)?;
        Ok(())
    }

    pub fn handle_frame(
        &mut self,
        cam: CamId,
        stamp: f64,
        obs: Vec<(FeatureId, Vec2)>,
    ) -> Result<(), EstimatorError> {
        if self.health.is_failed(SensorId::Cam(cam)) || !self.state.calib.cam.contains_key(&cam) {
            return Ok(());
        }
        let t_ib = self.to_base_imu_clock(SensorId::Cam(cam), stamp);
        self.health.note_sample(SensorId::Cam(cam), t_ib);
        if cam == self.state.base_cam {
            self.last_base_frame = Some(stamp);
            self.pending_steps.push_back((stamp, obs));
            self.drain_ready()?;
        } else {
            self.aux_frames.push_back((cam, stamp, obs));
        }
        Ok(())
    }

    /// Run queued steps whose IMU coverage is complete; declare timed-out
    /// sensors failed so a dead IMU cannot stall the pipeline.
    fn drain_ready(&mut self) -> Result<(), EstimatorError> {
        while let Some(stamp) = self.pending_steps.front().map(|(t, _)| *t) {
            let target_ib = stamp
                + self
                    .state
                    .calib
                    .cam
                    .get(&self.state.base_cam)
                    .map(|c| c.time_offset)
                    .unwrap_or(0.0);
            self.detect_failures(target_ib)?;
            if self.state.imus.is_empty() {
                return Err(ResilienceError::NoAliveImu.into());
            }
            if !self.imus_cover(target_ib) {
                break;
            }
            let (stamp, obs) = self.pending_steps.pop_front().unwrap();
            self.step(stamp, Some(obs))?;
        }
        Ok(())
    }

    fn imus_cover(&self, target_ib: f64) -> bool {
        for (&id, _) in self.state.imus.iter() {
            if self.health.is_failed(SensorId::Imu(id)) {
                continue;
            }
            let target = self.imu_target(id, target_ib);
            let covered = self
                .imu_buffers
                .get(&id)
                .and_then(|b| b.last())
                .map(|s| s.stamp + 1e-9 >= target)
                .unwrap_or(false);
            if !covered {
                return false;
            }
        }
        true
    }

    /// Propagation target of an IMU, in its own clock, for a base-IMU-clock
    /// target time.
    fn imu_target(&self, id: ImuId, target_ib: f64) -> f64 {
        if id == self.state.base_imu {
            target_ib
        } else {
            target_ib
                + self
                    .state
                    .calib
                    .imu
                    .get(&id)
                    .map(|c| c.time_offset)
                    .unwrap_or(0.0)
        }
    }

    /// Timeout-based failure detection at base-IMU-clock time `now`.
    fn detect_failures(&mut self, now: f64) -> Result<(), EstimatorError> {
        let imu_ids: Vec<ImuId> = self.state.imus.keys().copied().collect();
        for id in imu_ids {
            if !self.health.is_failed(SensorId::Imu(id))
                && self.health.timed_out(SensorId::Imu(id), now, self.cfg.failure_timeout)
            {
                self.fail_sensor(SensorId::Imu(id), now)?;
            }
        }
        let cam_ids: Vec<CamId> = self.state.calib.cam.keys().copied().collect();
        for id in cam_ids {
            if !self.health.is_failed(SensorId::Cam(id))
                && self.health.timed_out(SensorId::Cam(id), now, self.cfg.failure_timeout)
            {
                self.fail_sensor(SensorId::Cam(id), now)?;
            }
        }
        Ok(())
    }

    /// Declare a sensor failed and restructure the filter accordingly.
    pub fn fail_sensor(&mut self, sensor: SensorId, now: f64) -> Result<(), EstimatorError> {
        self.health.declare_failed(sensor, now);
        self.stats.failures_handled.push((now, sensor.to_string()));
        match sensor {
            SensorId::Imu(id) => {
                let action = handle_failure(&mut self.state, &mut self.link, SensorId::Imu(id))?;
                self.imu_buffers.remove(&id);
                if let FailureAction::BaseSwitched(_) = action {
                    self.stats.base_switches += 1;
                }
            }
            SensorId::Cam(id) => {
                // drop pending tracks of this camera
                self.tracks.retain(|(c, _), _| *c != id);
                self.aux_frames.retain(|(c, _, _)| *c != id);
                if id == self.state.base_cam {
                    // keep cloning at the last known rate on a synthetic
                    // schedule
                    let period = 1.0 / self.cam_rates.get(&id).copied().unwrap_or(10.0);
                    let next = self.last_base_frame.unwrap_or(now) + period;
                    self.synthetic = Some((next, period));
                }
            }
        }
        Ok(())
    }

    /// Fire synthetic cloning steps once IMU data covers them.
    fn poll_synthetic(&mut self, now_ib: f64) -> Result<(), EstimatorError> {
        loop {
            let Some((next, period)) = self.synthetic else {
                return Ok(());
            };
            let target_ib = next
                + self
                    .state
                    .calib
                    .cam
                    .get(&self.state.base_cam)
                    .map(|c| c.time_offset)
                    .unwrap_or(0.0);
            if target_ib > now_ib - 0.02 || !self.imus_cover(target_ib) {
                return Ok(());
            }
            self.detect_failures(target_ib)?;
            self.synthetic = Some((next + period, period));
            self.step(next, None)?;
        }
    }

    /// One filter step at base-camera stamp `stamp`. `obs` carries the base
    /// camera's own observations (`None` for synthetic clone ticks).
    fn step(&mut self, stamp: f64, obs: Option<Vec<(FeatureId, Vec2)>>) -> Result<(), EstimatorError> {
        self.t_first_step.get_or_insert(stamp);
        let t_run = stamp - self.t_first_step.unwrap();
        self.state.fej_enabled = self.cfg.fej;

        // 1. propagate every alive IMU to its own-clock target
        let base_off = self.state.calib.cam[&self.state.base_cam].time_offset;
        let target_ib = stamp + base_off;
        let mut windows = BTreeMap::new();
        let mut noises = BTreeMap::new();
        let imu_ids: Vec<ImuId> = self.state.imus.keys().copied().collect();
        for id in &imu_ids {
            if self.health.is_failed(SensorId::Imu(*id)) {
                continue;
            }
            let target = self.imu_target(*id, target_ib);
            let from = self.state.imus[id].stamp;
            let rate = self.imu_rates.get(id).copied().unwrap_or(400.0);
            let buf = self.imu_buffers.entry(*id).or_default();
            match extract_window(buf, from, target, 1.0 / rate) {
                Ok(w) => {
                    windows.insert(*id, (w, target));
                    noises.insert(*id, self.cfg.imu_noise);
                }
                Err(PropagationError::SampleGap { at, .. }) => {
                    // long dropout: engage failure handling now
                    self.fail_sensor(SensorId::Imu(*id), at)?;
                    if self.state.imus.is_empty() {
                        return Err(ResilienceError::NoAliveImu.into());
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        let gravity = crate::propagation::gravity_vector(self.cfg.gravity);
        propagate_joint(&mut self.state, &windows, &gravity, &noises)?;

        // 2. clone at the true imaging time
        let base = self.state.base_imu;
        let base_buf = self.imu_buffers.get(&base).map(|b| b.as_slice()).unwrap_or(&[]);
        let omega_hat = sample_at(base_buf, target_ib)
            .map(|(w, _)| w - self.state.imus[&base].bg)
            .unwrap_or_else(Vec3::zeros);
        augment_clone(&mut self.state, stamp, target_ib, &omega_hat)?;

        // 3. multi-IMU rigid constraints
        if !self.state.aux_imu_ids().is_empty() {
            let mut rates = BTreeMap::new();
            for id in self.state.aux_imu_ids() {
                let target = self.imu_target(id, target_ib);
                if let Some(buf) = self.imu_buffers.get(&id) {
                    if let Some((w, _)) = sample_at(buf, target) {
                        rates.insert(id, w - self.state.imus[&id].bg);
                    }
                }
            }
            let out = imu_constraint_update(&mut self.state, &rates, &self.cfg.update, t_run);
            self.stats.constraints_applied += out.applied;
            self.stats.constraints_gated += out.gated;
        }

        // 4. ingest frames: the base camera's own, then covered aux frames
        if let Some(obs) = obs {
            self.ingest_frame(self.state.base_cam, stamp, obs);
        }
        let mut rest = VecDeque::new();
        while let Some((cam, fstamp, fobs)) = self.aux_frames.pop_front() {
            let t_cb = fstamp
                + self
                    .state
                    .calib
                    .cam
                    .get(&cam)
                    .map(|c| c.time_offset)
                    .unwrap_or(0.0);
            if t_cb <= stamp + 1e-9 {
                self.ingest_frame(cam, fstamp, fobs);
            } else {
                rest.push_back((cam, fstamp, fobs));
            }
        }
        self.aux_frames = rest;

        // 5. visual updates
        self.visual_updates(stamp, t_run)?;

        // 6. snapshot in {I0}
        self.publish(stamp, target_ib);
        self.stats.steps += 1;
        self.prune_buffers(target_ib);
        Ok(())
    }

    fn ingest_frame(&mut self, cam: CamId, stamp: f64, obs: Vec<(FeatureId, Vec2)>) {
        let mut seen: Vec<FeatureId> = Vec::with_capacity(obs.len());
        for (fid, px) in obs {
            seen.push(fid);
            if self.state.features.contains_key(&fid) {
                self.slam_obs.entry(fid).or_default().push((cam, stamp, px));
                self.slam_last_seen.insert(fid, stamp);
            } else {
                let track = self
                    .tracks
                    .entry((cam, fid))
                    .or_insert_with(|| Track { obs: Vec::new(), done: false });
                track.obs.push((stamp, px));
            }
        }
        // tracks of this camera not seen in this frame have left the view
        for ((c, fid), track) in self.tracks.iter_mut() {
            if *c == cam && !seen.contains(fid) && !track.obs.is_empty() {
                track.done = true;
            }
        }
    }

    fn visual_updates(&mut self, stamp: f64, t_run: f64) -> Result<(), EstimatorError> {
        // second-oldest clone stamp: the MSCKF trigger boundary
        let clones = self.state.clones_by_time();
        let second_oldest = if clones.len() >= 2 {
            clones[1].1.stamp
        } else {
            f64::NEG_INFINITY
        };

        // collect finished/triggered tracks, promote SLAM candidates
        let mut msckf_batch: Vec<FeatureTrack> = Vec::new();
        let mut slam_candidates: Vec<(CamId, FeatureId)> = Vec::new();
        let keys: Vec<(CamId, FeatureId)> = self.tracks.keys().copied().collect();
        for key in keys {
            let (cam, fid) = key;
            let track = &self.tracks[&key];
            let first_cb = track.obs.first().map(|(t, _)| {
                t + if cam == self.state.base_cam {
                    0.0
                } else {
                    self.state
                        .calib
                        .cam
                        .get(&cam)
                        .map(|c| c.time_offset)
                        .unwrap_or(0.0)
                }
            });
            let triggered = first_cb.map(|t| t < second_oldest).unwrap_or(false);
            let mature = track.obs.len() > self.cfg.window_size;
            let cap_free = self.state.features.len() < self.cfg.update.slam_cap;
            if mature && cap_free && !track.done {
                slam_candidates.push(key);
            } else if track.done || triggered || mature {
                let track = self.tracks.remove(&key).unwrap();
                if track.obs.len() >= self.cfg.msckf_min_obs.max(2) {
                    msckf_batch.push(FeatureTrack {
                        feature: fid,
                        cam,
                        obs: track.obs,
                    });
                }
            }
        }

        let imu_buf: Vec<ImuSample2> = self
            .imu_buffers
            .get(&self.state.base_imu)
            .cloned()
            .unwrap_or_default();
        let ctx = update::VisualContext {
            cfg: &self.cfg.update,
            t_run,
            imu_buffer: Some(&imu_buf),
        };

        // MSCKF batch
        if !msckf_batch.is_empty() {
            let out = msckf_update(&mut self.state, &msckf_batch, &ctx);
            self.stats.msckf_tracks_used += out.tracks_used;
            self.stats.msckf_tracks_gated += out.tracks_gated;
            self.stats.msckf_tracks_failed += out.tracks_failed;
        }

        // SLAM updates with this step's staged observations
        if !self.slam_obs.is_empty() {
            let groups: Vec<(FeatureId, Vec<(CamId, f64, Vec2)>)> =
                self.slam_obs.drain().collect();
            let mut groups = groups;
            groups.sort_by_key(|(fid, _)| *fid);
            let out = slam_update(&mut self.state, &groups, &ctx);
            self.stats.slam_updates += out.tracks_used;
        }

        // delayed initialization of mature candidates
        for key in slam_candidates {
            if self.state.features.len() >= self.cfg.update.slam_cap {
                break;
            }
            let Some(track) = self.tracks.get(&key) else { continue };
            let ft = FeatureTrack {
                feature: key.1,
                cam: key.0,
                obs: track.obs.clone(),
            };
            match slam_init(&mut self.state, &ft, &ctx) {
                Ok(fid) => {
                    self.stats.slam_inits += 1;
                    self.slam_last_seen.insert(fid, stamp);
                    self.tracks.remove(&key);
                }
                Err(_) => {
                    // keep as a normal track; it will go the MSCKF route
                    if let Some(t) = self.tracks.get_mut(&key) {
                        t.done = true;
                    }
                }
            }
        }

        // marginalize lost SLAM features
        let lost: Vec<FeatureId> = self
            .state
            .features
            .keys()
            .copied()
            .filter(|fid| {
                self.slam_last_seen
                    .get(fid)
                    .map(|t| stamp - t > self.cfg.slam_lost_timeout)
                    .unwrap_or(true)
            })
            .collect();
        for fid in lost {
            self.state.marginalize(&[EntryKey::Feature(fid)])?;
            self.slam_last_seen.remove(&fid);
        }
        Ok(())
    }

    fn publish(&mut self, stamp: f64, target_ib: f64) {
        let (pose, cov) = output_pose_in_i0(&self.state, &self.link);
        let vel = self.state.imus[&self.state.base_imu].vel;
        let mut calib_sigma = Vec::new();
        let sig = self.state.sigma_diagonal();
        for key in self.state.order() {
            if key.is_calibration() {
                let off = self.state.offset_of(*key).unwrap();
                calib_sigma.push((
                    *key,
                    (0..key.dim()).map(|i| sig[off + i]).collect::<Vec<f64>>(),
                ));
            }
        }
        self.snapshots.push(Snapshot {
            t_cam: stamp,
            t_imu_est: target_ib,
            pose,
            cov,
            vel,
            calib: self.state.calib.clone(),
            calib_sigma,
        });
    }

    fn prune_buffers(&mut self, now_ib: f64) {
        let horizon = 2.0 * self.cfg.window_size as f64 / 5.0 + 3.0;
        let cuts: Vec<(ImuId, f64)> = self
            .imu_buffers
            .keys()
            .map(|id| (*id, self.imu_target(*id, now_ib - horizon)))
            .collect();
        for (id, cut) in cuts {
            if let Some(buf) = self.imu_buffers.get_mut(&id) {
                let keep_from = buf.partition_point(|s| s.stamp < cut);
                if keep_from > 1 {
                    buf.drain(..keep_from - 1);
                }
            }
        }
    }

    /// Current published pose (for callers between snapshots).
    pub fn current_output(&self) -> (Pose, Mat6) {
        output_pose_in_i0(&self.state, &self.link)
    }
}

/// Marginal sigma of one entry, for logs and tests.
pub fn entry_sigma(state: &FullState, key: EntryKey) -> Option<DVector<f64>> {
    let off = state.offset_of(key)?;
    let sig = state.sigma_diagonal();
    Some(DVector::from_iterator(
        key.dim(),
        (0..key.dim()).map(|i| sig[off + i]),
    ))
}
