//! Sensor-failure handling: timeout-based health tracking, promotion of an
//! auxiliary IMU to base (re-expressing clones, extrinsics, and clocks with
//! a proper mean and covariance transform), and publication of the estimate
//! in the first-ever base frame `{I0}` so downstream consumers never see a
//! frame jump.

use std::collections::HashMap;

use nalgebra::{DMatrix, SMatrix};

use crate::manifold::{skew, Mat3, Rotation, Vec3};
use crate::state::{CamId, EntryKey, EntryValue, FullState, ImuCalib, ImuId};
use crate::Pose;

pub type Mat6 = SMatrix<f64, 6, 6>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SensorId {
    Imu(ImuId),
    Cam(CamId),
}

impl std::fmt::Display for SensorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SensorId::Imu(i) => write!(f, "{i}"),
            SensorId::Cam(c) => write!(f, "{c}"),
        }
    }
}

/// Per-sensor liveness bookkeeping. Times are compared on the base-camera
/// clock (mapped through current offset estimates), which is accurate to the
/// offset error and plenty for a half-second timeout.
#[derive(Debug, Clone, Default)]
pub struct SensorHealth {
    last_sample: HashMap<SensorId, f64>,
    failed: HashMap<SensorId, f64>,
}

impl SensorHealth {
    pub fn note_sample(&mut self, id: SensorId, t: f64) {
        if self.failed.contains_key(&id) {
            return; // failed sensors never contribute again
        }
        let e = self.last_sample.entry(id).or_insert(t);
        *e = e.max(t);
    }

    pub fn declare_failed(&mut self, id: SensorId, t: f64) {
        self.failed.entry(id).or_insert(t);
    }

    pub fn is_failed(&self, id: SensorId) -> bool {
        self.failed.contains_key(&id)
    }

    pub fn last_sample(&self, id: SensorId) -> Option<f64> {
        self.last_sample.get(&id).copied()
    }

    /// True when the sensor has been silent past the timeout relative to
    /// `now`.
    pub fn timed_out(&self, id: SensorId, now: f64, timeout: f64) -> bool {
        match self.last_sample.get(&id) {
            Some(last) => now - last > timeout,
            None => false,
        }
    }
}

/// Rigid link from the current base IMU frame to the first-ever base frame
/// `{I0}`: `rot` maps current-base vectors into `{I0}`, `pos` is the `{I0}`
/// origin in the current base frame. Identity while the original base is
/// alive; covariance accumulates only at switch events.
#[derive(Debug, Clone)]
pub struct OutputFrameLink {
    pub rot: Rotation,
    pub pos: Vec3,
    pub cov: Mat6,
}

impl Default for OutputFrameLink {
    fn default() -> Self {
        OutputFrameLink {
            rot: Rotation::identity(),
            pos: Vec3::zeros(),
            cov: Mat6::zeros(),
        }
    }
}

impl OutputFrameLink {
    /// Published pose (of the `{I0}` body frame) and its covariance composed
    /// through the link Jacobian.
    pub fn output_pose(&self, state: &FullState) -> (Pose, Mat6) {
        let base = state.base_imu;
        let x = state.imus[&base];
        // R_{I0<-G} = R_{I0<-In} R_{In<-G}; p_{I0} = p_{In} + R_{G<-In} p_link
        let rot = self.rot.compose(&x.rot);
        let pos = x.pos + x.rot.rotate_inv(&self.pos);

        // covariance: J_state over (theta_n, p_n) plus J_link over the
        // frozen link uncertainty
        let l_r = self.rot.matrix();
        let mut j_state = Mat6::zeros();
        j_state.fixed_view_mut::<3, 3>(0, 0).copy_from(&l_r);
        j_state
            .fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-(x.rot.matrix().transpose()) * skew(&self.pos)));
        j_state
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&Mat3::identity());
        let mut j_link = Mat6::zeros();
        j_link
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Mat3::identity());
        j_link
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&x.rot.matrix().transpose());

        let ot = state.offset_of(EntryKey::ImuTheta(base)).unwrap();
        let op = state.offset_of(EntryKey::ImuPos(base)).unwrap();
        let mut p_pose = Mat6::zeros();
        let cov = state.cov();
        for r in 0..3 {
            for c in 0..3 {
                p_pose[(r, c)] = cov[(ot + r, ot + c)];
                p_pose[(r, 3 + c)] = cov[(ot + r, op + c)];
                p_pose[(3 + r, c)] = cov[(op + r, ot + c)];
                p_pose[(3 + r, 3 + c)] = cov[(op + r, op + c)];
            }
        }
        let out_cov = j_state * p_pose * j_state.transpose() + j_link * self.cov * j_link.transpose();
        (Pose::new(rot, pos), 0.5 * (out_cov + out_cov.transpose()))
    }

    /// Account for a base switch: the link now points at the new base
    /// through the (current estimate of the) old-base-to-new extrinsics,
    /// whose uncertainty is absorbed into the link covariance.
    fn absorb_switch(&mut self, cal_new: &ImuCalib, cal_cov: &Mat6) {
        // rot' = rot o R_{Ib<-In};  pos' = R_en^T (pos - p_en)
        let r_en = cal_new.rot;
        let new_rot = self.rot.compose(&r_en);
        let new_pos = r_en.rotate_inv(&(self.pos - cal_new.pos));

        // errors: link (theta_l, p_l), calib (theta_e, p_e)
        // theta': Exp(-t') L R_en with L = Exp(-t_l) L_hat, R_en = Exp(-t_e) R_hat
        //   => t' = t_l + L_hat t_e
        // p' = R_en^T (p_l_vec - p_en):
        //   d/dp_l = R_hat^T; d/dp_e = -R_hat^T;
        //   d/dtheta_e: R_en^T = R_hat^T Exp(theta_e) => R_hat^T [theta_e x](p-p_en)
        //     = -R_hat^T [(p-p_en) x] theta_e
        let l_hat = self.rot.matrix();
        let r_hat_t = r_en.matrix().transpose();
        let mut j_l = Mat6::zeros();
        j_l.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
        j_l.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_hat_t);
        let mut j_e = Mat6::zeros();
        j_e.fixed_view_mut::<3, 3>(0, 0).copy_from(&l_hat);
        j_e.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-r_hat_t * skew(&(self.pos - cal_new.pos))));
        j_e.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r_hat_t));

        self.cov = j_l * self.cov * j_l.transpose() + j_e * cal_cov * j_e.transpose();
        self.rot = new_rot;
        self.pos = new_pos;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ResilienceError {
    #[error("no alive auxiliary IMU to promote; estimation cannot continue")]
    NoAliveImu,
    #[error("IMU {0} has no calibration entries")]
    MissingCalibration(ImuId),
    #[error(transparent)]
    State(#[from] crate::state::StateError),
}

/// Promote `new_base` to base IMU: every clone is re-expressed in the new
/// base frame, IMU-IMU and camera-IMU extrinsics and every clock offset are
/// re-chained, and mean and covariance are transformed with the analytic
/// Jacobian of the frame change. The old base receives extrinsic entries
/// relative to the new base (in place of the promoted IMU's entries).
pub fn switch_base_imu(state: &mut FullState, new_base: ImuId) -> Result<(), ResilienceError> {
    let old_base = state.base_imu;
    if new_base == old_base {
        return Ok(());
    }
    if !state.imus.contains_key(&new_base) {
        return Err(ResilienceError::NoAliveImu);
    }
    let cal_n = *state
        .calib
        .imu
        .get(&new_base)
        .ok_or(ResilienceError::MissingCalibration(new_base))?;
    let r_en = cal_n.rot; // R_{Ib<-In}
    let r_en_t = r_en.matrix().transpose();
    let p_en = cal_n.pos;
    let t_en = cal_n.time_offset;

    // dense Jacobian of the transform, identity outside modified blocks
    let dim = state.dim();
    let mut t = DMatrix::identity(dim, dim);
    fn put(t: &mut DMatrix<f64>, r0: usize, c0: usize, m: &Mat3) {
        for r in 0..3 {
            for c in 0..3 {
                t[(r0 + r, c0 + c)] = m[(r, c)];
            }
        }
    }

    let o_et = state.offset_of(EntryKey::CalImuTheta(new_base)).unwrap();
    let o_ep = state.offset_of(EntryKey::CalImuPos(new_base)).unwrap();
    let o_etime = state.offset_of(EntryKey::CalImuTime(new_base)).unwrap();

    // clones: R' = R_en^T R_c, p' = p_c + R_c^T p_en
    let clone_ids: Vec<_> = state.clones.keys().copied().collect();
    for cid in &clone_ids {
        let ot = state.offset_of(EntryKey::CloneTheta(*cid)).unwrap();
        let op = state.offset_of(EntryKey::ClonePos(*cid)).unwrap();
        let r_c = state.clones[cid].pose.rot;
        put(&mut t, ot, ot, &r_en_t);
        put(&mut t, ot, o_et, &(-r_en_t));
        // p rows
        put(&mut t, op, ot, &(-(r_c.matrix().transpose()) * skew(&p_en)));
        put(&mut t, op, o_ep, &r_c.matrix().transpose());
        // identity on (op, op) already present
    }

    // old-base extrinsics (replacing the promoted IMU's entries):
    // R'_eb = R_en^T, p'_eb = -R_en^T p_en, t'_eb = -t_en
    put(&mut t, o_et, o_et, &(-r_en_t));
    put(&mut t, o_ep, o_ep, &(-r_en_t));
    put(&mut t, o_ep, o_et, &(r_en_t * skew(&p_en)));
    t[(o_etime, o_etime)] = -1.0;

    // other auxiliary IMUs: R' = R_en^T R_ei, p' = R_en^T (p_ei - p_en),
    // t' = t_ei - t_en
    let other_aux: Vec<ImuId> = state
        .calib
        .imu
        .keys()
        .copied()
        .filter(|id| *id != new_base)
        .collect();
    for aux in &other_aux {
        let oi_t = state.offset_of(EntryKey::CalImuTheta(*aux)).unwrap();
        let oi_p = state.offset_of(EntryKey::CalImuPos(*aux)).unwrap();
        let oi_time = state.offset_of(EntryKey::CalImuTime(*aux)).unwrap();
        let p_ei = state.calib.imu[aux].pos;
        put(&mut t, oi_t, oi_t, &r_en_t);
        put(&mut t, oi_t, o_et, &(-r_en_t));
        put(&mut t, oi_p, oi_p, &r_en_t);
        put(&mut t, oi_p, o_ep, &(-r_en_t));
        put(&mut t, oi_p, o_et, &(-r_en_t * skew(&(p_ei - p_en))));
        t[(oi_time, o_etime)] = -1.0;
        // keep identity on (oi_time, oi_time)
    }

    // cameras: R'_ck = R_ck R_en, p'_ck = p_ck + R_ck p_en;
    // base-camera offset gains the IMU-IMU offset
    let cams: Vec<CamId> = state.calib.cam.keys().copied().collect();
    for cam in &cams {
        let oc_t = state.offset_of(EntryKey::CalCamTheta(*cam)).unwrap();
        let oc_p = state.offset_of(EntryKey::CalCamPos(*cam)).unwrap();
        let r_ck = state.calib.cam[cam].rot;
        // theta' = theta_ck + R_ck theta_en
        put(&mut t, oc_t, o_et, &r_ck.matrix());
        // p' = p_ck + R_ck p_en: columns on theta_ck and on p_en
        put(&mut t, oc_p, oc_t, &skew(&(r_ck.rotate(&p_en))));
        put(&mut t, oc_p, o_ep, &r_ck.matrix());
        if *cam == state.base_cam {
            let oc_time = state.offset_of(EntryKey::CalCamTime(*cam)).unwrap();
            t[(oc_time, o_etime)] = 1.0;
        }
    }

    // covariance
    {
        let p = state.cov_mut();
        *p = &t * &*p * t.transpose();
    }
    state.symmetrize();

    // means (current estimates), then the FEJ registry through the same
    // deterministic map evaluated at the linearization values
    for cid in &clone_ids {
        let c = state.clones.get_mut(cid).unwrap();
        c.pose = Pose::new(
            r_en.inverse().compose(&c.pose.rot),
            c.pose.pos + c.pose.rot.rotate_inv(&p_en),
        );
        c.imu_stamp += t_en;
        // FEJ values through the same map
        let f_rot = state.fej_value(EntryKey::CloneTheta(*cid)).unwrap().as_rot();
        let f_pos = state.fej_value(EntryKey::ClonePos(*cid)).unwrap().as_vec3();
        state.fej_set(
            EntryKey::CloneTheta(*cid),
            EntryValue::Rot(r_en.inverse().compose(&f_rot)),
        );
        state.fej_set(
            EntryKey::ClonePos(*cid),
            EntryValue::vec3(f_pos + f_rot.rotate_inv(&p_en)),
        );
    }
    for aux in &other_aux {
        let cal = state.calib.imu.get_mut(aux).unwrap();
        cal.rot = r_en.inverse().compose(&cal.rot);
        cal.pos = r_en.rotate_inv(&(cal.pos - p_en));
        cal.time_offset -= t_en;
    }
    for cam in &cams {
        let is_base_cam = *cam == state.base_cam;
        let cal = state.calib.cam.get_mut(cam).unwrap();
        cal.pos += cal.rot.rotate(&p_en);
        cal.rot = cal.rot.compose(&r_en);
        if is_base_cam {
            cal.time_offset += t_en;
        }
    }
    // promote: the new base loses its extrinsic entries, the old base gains
    // the inverted ones under the same covariance slots
    state.calib.imu.remove(&new_base);
    state.calib.imu.insert(
        old_base,
        ImuCalib {
            rot: r_en.inverse(),
            pos: -r_en.rotate_inv(&p_en),
            time_offset: -t_en,
        },
    );
    state.relabel_imu_calib(new_base, old_base);
    state.base_imu = new_base;
    Ok(())
}

/// Outcome of [`handle_failure`], telling the runner what changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureAction {
    /// Auxiliary IMU removed from the state.
    ImuMarginalized(ImuId),
    /// Base switched to the contained IMU (old base marginalized);
    /// the output link was updated.
    BaseSwitched(ImuId),
    /// Camera dropped; if it was the base camera the runner must keep
    /// cloning on a synthetic schedule.
    CameraDropped { was_base: bool },
}

/// Remove a failed sensor from the estimation problem. For a failed base
/// IMU the lowest-id alive auxiliary IMU is promoted first (deterministic
/// choice), and the `{I0}` output link absorbs the switch.
pub fn handle_failure(
    state: &mut FullState,
    link: &mut OutputFrameLink,
    sensor: SensorId,
) -> Result<FailureAction, ResilienceError> {
    match sensor {
        SensorId::Imu(id) if id != state.base_imu => {
            let mut keys = state.imu_entry_keys(id);
            if state.calib.imu.contains_key(&id) {
                keys.extend(state.imu_calib_entry_keys(id));
            }
            state.marginalize(&keys)?;
            Ok(FailureAction::ImuMarginalized(id))
        }
        SensorId::Imu(old_base) => {
            let new_base = state
                .aux_imu_ids()
                .into_iter()
                .min()
                .ok_or(ResilienceError::NoAliveImu)?;
            let cal = *state
                .calib
                .imu
                .get(&new_base)
                .ok_or(ResilienceError::MissingCalibration(new_base))?;
            // marginal covariance of the promoted extrinsic, for the link
            let ot = state.offset_of(EntryKey::CalImuTheta(new_base)).unwrap();
            let op = state.offset_of(EntryKey::CalImuPos(new_base)).unwrap();
            let mut cal_cov = Mat6::zeros();
            for r in 0..3 {
                for c in 0..3 {
                    cal_cov[(r, c)] = state.cov()[(ot + r, ot + c)];
                    cal_cov[(r, 3 + c)] = state.cov()[(ot + r, op + c)];
                    cal_cov[(3 + r, c)] = state.cov()[(op + r, ot + c)];
                    cal_cov[(3 + r, 3 + c)] = state.cov()[(op + r, op + c)];
                }
            }
            switch_base_imu(state, new_base)?;
            link.absorb_switch(&cal, &cal_cov);
            // the failed old base (now auxiliary) leaves the state entirely
            let mut keys = state.imu_entry_keys(old_base);
            keys.extend(state.imu_calib_entry_keys(old_base));
            state.marginalize(&keys)?;
            Ok(FailureAction::BaseSwitched(new_base))
        }
        SensorId::Cam(id) => Ok(FailureAction::CameraDropped {
            was_base: id == state.base_cam,
        }),
    }
}

/// Published pose in the `{I0}` frame with covariance.
pub fn output_pose_in_i0(state: &FullState, link: &OutputFrameLink) -> (Pose, Mat6) {
    link.output_pose(state)
}
