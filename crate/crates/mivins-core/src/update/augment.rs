//! Stochastic cloning of the base-IMU pose at the true imaging time.
//!
//! After propagating to the estimated image time, the pose at the (unknown)
//! true time differs to first order by the motion over the time-offset
//! error:
//!
//! ```text
//! p(t_true) ~ p_hat + v_hat * dt_off
//! R(t_true) ~ Exp(-w_hat * dt_off) R_hat
//! ```
//!
//! so the clone Jacobian is identity on the base pose plus a velocity /
//! angular-rate column on the base-camera time-offset entry.

use nalgebra::DMatrix;

use crate::manifold::Vec3;
use crate::state::{CloneId, EntryKey, FullState, StateError};

/// Clone the base pose for the frame with nominal base-camera stamp
/// `stamp_cb`. `omega_hat` is the bias-corrected gyro rate at the estimated
/// imaging time and `imu_time_est` that time in the base-IMU clock (cached
/// on the clone for interpolation residuals). Marginalizes the oldest clone
/// first when the window is full.
pub fn augment_clone(
    state: &mut FullState,
    stamp_cb: f64,
    imu_time_est: f64,
    omega_hat: &Vec3,
) -> Result<CloneId, StateError> {
    if state.clones.len() >= state.max_clones {
        let oldest = state.oldest_clone().expect("nonempty window");
        state.marginalize(&state.clone_entry_keys(oldest))?;
    }
    let base = state.base_imu;
    let imu = state.imus[&base];
    let vel = imu.vel;

    let mut jt = DMatrix::zeros(6, 3);
    jt.view_mut((0, 0), (3, 3)).fill_with_identity();
    let mut jp = DMatrix::zeros(6, 3);
    jp.view_mut((3, 0), (3, 3)).fill_with_identity();
    let mut jtime = DMatrix::zeros(6, 1);
    for i in 0..3 {
        jtime[(i, 0)] = omega_hat[i];
        jtime[(3 + i, 0)] = vel[i];
    }
    let jac = vec![
        (EntryKey::ImuTheta(base), jt),
        (EntryKey::ImuPos(base), jp),
        (EntryKey::CalCamTime(state.base_cam), jtime),
    ];
    state.clone_pose(imu.pose(), stamp_cb, vel, imu_time_est, &jac)
}
