//! Rigid-body relative-pose constraints between the base IMU and every
//! auxiliary IMU, applied as EKF measurements with a small synthetic noise.
//!
//! Because each IMU is propagated to the estimated base time expressed in
//! its own (offset) clock, the constraint residual carries a first-order
//! time-offset term whose Jacobian columns are the IMU's angular rate and
//! velocity. The base pose linearizes at its first estimate; calibration
//! always uses the current estimate.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::manifold::{skew, Mat3, Vec3};
use crate::state::{EntryKey, FullState, ImuId};

use super::{chi2_threshold, UpdateConfig};

#[derive(Debug, Clone, Copy, Default)]
pub struct ConstraintOutcome {
    pub applied: usize,
    /// Constraints rejected by the chi-square gate (flags a calibration or
    /// clock fault).
    pub gated: usize,
}

/// Residual and sparse Jacobian blocks for one auxiliary IMU.
fn constraint_rows(
    state: &FullState,
    aux: ImuId,
    omega_hat: &Vec3,
) -> (DVector<f64>, Vec<(EntryKey, DMatrix<f64>)>) {
    let base = state.base_imu;
    let cal = state.calib.imu[&aux];
    let xb = state.imus[&base];
    let xi = state.imus[&aux];

    // residual at the current estimates (time-offset error enters only
    // through the Jacobian columns)
    let q_rel = xb.rot.compose(&xi.rot.inverse()).compose(&cal.rot.inverse());
    let r_theta = 2.0 * q_rel.quat_vec();
    let r_pos = xb.pos + xb.rot.rotate_inv(&cal.pos) - xi.pos;

    // Jacobians: FEJ base pose, current calibration / auxiliary values
    let rb_lin = state
        .fej_imu_pose(base)
        .map(|p| p.rot)
        .unwrap_or(xb.rot);
    let r_cal = cal.rot.matrix();
    let mut blocks: Vec<(EntryKey, DMatrix<f64>)> = Vec::new();
    let put = |m: &Mat3, row: usize| {
        let mut b = DMatrix::zeros(6, 3);
        b.view_mut((row, 0), (3, 3)).copy_from(m);
        b
    };

    // r_theta rows (0..3)
    let mut b_theta_b = put(&Mat3::identity(), 0);
    // r_pos rows (3..6)
    let gb = rb_lin.matrix().transpose(); // R_GIb at linearization
    b_theta_b
        .view_mut((3, 0), (3, 3))
        .copy_from(&(-gb * skew(&cal.pos)));
    blocks.push((EntryKey::ImuTheta(base), b_theta_b));
    blocks.push((EntryKey::ImuPos(base), put(&Mat3::identity(), 3)));
    blocks.push((EntryKey::ImuTheta(aux), put(&(-r_cal), 0)));
    blocks.push((EntryKey::ImuPos(aux), put(&(-Mat3::identity()), 3)));
    blocks.push((EntryKey::CalImuTheta(aux), put(&(-Mat3::identity()), 0)));
    blocks.push((EntryKey::CalImuPos(aux), put(&gb, 3)));
    let mut b_time = DMatrix::zeros(6, 1);
    let dtheta_dt = -r_cal * omega_hat;
    let dpos_dt = -xi.vel;
    for i in 0..3 {
        b_time[(i, 0)] = dtheta_dt[i];
        b_time[(3 + i, 0)] = dpos_dt[i];
    }
    blocks.push((EntryKey::CalImuTime(aux), b_time));

    let mut r = DVector::zeros(6);
    for i in 0..3 {
        // measurement form: z = 0, so the update residual is -r(x_hat)
        r[i] = -r_theta[i];
        r[3 + i] = -r_pos[i];
    }
    (r, blocks)
}

/// Apply the rigid constraint update for every auxiliary IMU.
/// `omega_hat` carries each auxiliary IMU's bias-corrected angular rate at
/// its propagated time.
pub fn imu_constraint_update(
    state: &mut FullState,
    omega_hat: &BTreeMap<ImuId, Vec3>,
    cfg: &UpdateConfig,
    t_run: f64,
) -> ConstraintOutcome {
    let mut outcome = ConstraintOutcome::default();
    let sigma = cfg.constraint_sigma_for(t_run);
    let aux_ids = state.aux_imu_ids();
    for aux in aux_ids {
        if !state.calib.imu.contains_key(&aux) {
            continue;
        }
        let w = omega_hat.get(&aux).copied().unwrap_or_else(Vec3::zeros);
        let (r, blocks) = constraint_rows(state, aux, &w);
        let h = state.assemble_blocks(&blocks, 6).expect("entries exist");
        // chi-square gate
        let s = &h * state.cov() * h.transpose()
            + DMatrix::from_diagonal(&DVector::from_element(6, sigma * sigma));
        let gamma = match s.clone().cholesky() {
            Some(chol) => (r.transpose() * chol.solve(&r))[(0, 0)],
            None => f64::INFINITY,
        };
        if gamma > chi2_threshold(6, cfg.chi2_level) {
            outcome.gated += 1;
            continue;
        }
        state.ekf_update(&h, &r, &DVector::from_element(6, sigma));
        outcome.applied += 1;
    }
    outcome
}
