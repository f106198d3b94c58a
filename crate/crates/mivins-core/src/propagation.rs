//! IMU state integration and joint covariance propagation.
//!
//! Each IMU's mean is integrated with RK4 over its measurement stream
//! (piecewise-linear interpolation between samples), while the 15x15
//! state-transition matrix and discrete noise covariance are integrated
//! alongside from their variational equations
//!
//! ```text
//! Phi_dot = F(t) Phi,   Q_dot = F Q + Q F^T + G Qc G^T
//! ```
//!
//! When first-estimates Jacobians are active, `F` is evaluated along a
//! parallel trajectory started from the IMU's linearization state (its
//! estimate as left by propagation, untouched by updates), so repeated
//! updates cannot leak spurious information into the unobservable directions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::manifold::{skew, Mat3, Rotation, Vec3, Vec4};
use crate::state::{EntryKey, EntryValue, FullState, ImuId, ImuMean};

pub type Mat15 = SMatrix<f64, 15, 15>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Sensor-clock timestamp (s).
    pub stamp: f64,
    /// Measured angular rate (rad/s).
    pub gyro: Vec3,
    /// Measured specific force (m/s^2).
    pub accel: Vec3,
}

/// Continuous-time IMU noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_g: f64,
    pub sigma_wg: f64,
    pub sigma_a: f64,
    pub sigma_wa: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_g: 1.6968e-4,
            sigma_wg: 1.9393e-5,
            sigma_a: 2.0e-3,
            sigma_wa: 3.0e-3,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> bool {
        self.sigma_g > 0.0 && self.sigma_wg > 0.0 && self.sigma_a > 0.0 && self.sigma_wa > 0.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PropagationError {
    #[error("non-monotonic IMU timestamps ({prev:.6} -> {next:.6})")]
    NonMonotonic { prev: f64, next: f64 },
    #[error("IMU sample gap of {gap:.4}s exceeds {max:.4}s near t={at:.4}")]
    SampleGap { gap: f64, max: f64, at: f64 },
    #[error("no samples for IMU {0:?} and nonzero interval requested")]
    NoSamples(ImuId),
}

/// Piecewise-linear view over a sample window.
struct SampleInterp<'a> {
    samples: &'a [ImuSample],
}

impl SampleInterp<'_> {
    fn at(&self, t: f64) -> (Vec3, Vec3) {
        let s = self.samples;
        if t <= s[0].stamp {
            return (s[0].gyro, s[0].accel);
        }
        if t >= s[s.len() - 1].stamp {
            let last = &s[s.len() - 1];
            return (last.gyro, last.accel);
        }
        let i = s.partition_point(|x| x.stamp <= t) - 1;
        let (a, b) = (&s[i], &s[i + 1]);
        let dt = b.stamp - a.stamp;
        if dt <= 0.0 {
            return (a.gyro, a.accel);
        }
        let w = (t - a.stamp) / dt;
        (
            a.gyro * (1.0 - w) + b.gyro * w,
            a.accel * (1.0 - w) + b.accel * w,
        )
    }
}

/// Integration state carried through RK4: current mean, linearization mean,
/// transition matrix and accumulated noise covariance. Quaternions are
/// treated as R^4 within a step and renormalized at step boundaries.
#[derive(Clone)]
struct IntState {
    q: Vec4,
    v: Vec3,
    p: Vec3,
    q_lin: Vec4,
    v_lin: Vec3,
    p_lin: Vec3,
    phi: Mat15,
    qd: Mat15,
}

struct IntDeriv {
    q: Vec4,
    v: Vec3,
    p: Vec3,
    q_lin: Vec4,
    v_lin: Vec3,
    p_lin: Vec3,
    phi: Mat15,
    qd: Mat15,
}

fn quat_omega(w: &Vec3) -> SMatrix<f64, 4, 4> {
    let mut m = SMatrix::<f64, 4, 4>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(w)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

fn rot_of(q: &Vec4) -> Rotation {
    Rotation::from_quat_xyzw(*q)
}

/// Continuous-time error-state matrix `F` for error order (theta bg v ba p)
/// and the noise input matrix `G` for noise order (ng nwg na nwa).
fn error_dynamics(rot: &Rotation, omega: &Vec3, accel: &Vec3) -> (Mat15, SMatrix<f64, 15, 12>) {
    let mut f = Mat15::zeros();
    let r_t = rot.matrix().transpose();
    f.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(omega)));
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity()));
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r_t * skew(accel)));
    f.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-r_t));
    f.fixed_view_mut::<3, 3>(12, 6).copy_from(&Mat3::identity());

    let mut g = SMatrix::<f64, 15, 12>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-Mat3::identity()));
    g.fixed_view_mut::<3, 3>(3, 3).copy_from(&Mat3::identity());
    g.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r_t));
    g.fixed_view_mut::<3, 3>(9, 9).copy_from(&Mat3::identity());
    (f, g)
}

/// Propagate one IMU over `[x.stamp, t_end]`, returning the new mean, the
/// 15x15 state-transition matrix and the discrete noise covariance.
///
/// `samples` must cover the interval (boundary values are interpolated or
/// held). `lin` is the linearization state the transition matrix is
/// evaluated along; pass `None` to linearize at `x` itself. The returned
/// last tuple element is `lin` propagated to `t_end`.
pub fn integrate_imu(
    x: &ImuMean,
    samples: &[ImuSample],
    t_end: f64,
    gravity: &Vec3,
    noise: &NoiseSpec,
    lin: Option<&ImuMean>,
) -> Result<(ImuMean, Mat15, Mat15, ImuMean), PropagationError> {
    let t0 = x.stamp;
    let lin = lin.copied().unwrap_or(*x);
    if (t_end - t0).abs() < 1e-12 || samples.is_empty() {
        // empty window: identity transition over zero time
        let mut out = *x;
        out.stamp = t_end;
        let mut out_lin = lin;
        out_lin.stamp = t_end;
        return Ok((out, Mat15::identity(), Mat15::zeros(), out_lin));
    }
    for w in samples.windows(2) {
        if w[1].stamp <= w[0].stamp {
            return Err(PropagationError::NonMonotonic {
                prev: w[0].stamp,
                next: w[1].stamp,
            });
        }
    }
    let interp = SampleInterp { samples };

    let mut qc = SMatrix::<f64, 12, 12>::zeros();
    for i in 0..3 {
        qc[(i, i)] = noise.sigma_g * noise.sigma_g;
        qc[(3 + i, 3 + i)] = noise.sigma_wg * noise.sigma_wg;
        qc[(6 + i, 6 + i)] = noise.sigma_a * noise.sigma_a;
        qc[(9 + i, 9 + i)] = noise.sigma_wa * noise.sigma_wa;
    }

    let deriv = |t: f64, s: &IntState| -> IntDeriv {
        let (wm, am) = interp.at(t);
        let w_hat = wm - x.bg;
        let a_hat = am - x.ba;
        let rot = rot_of(&s.q);
        let rot_lin = rot_of(&s.q_lin);
        let (f, g) = error_dynamics(&rot_lin, &w_hat, &a_hat);
        IntDeriv {
            q: 0.5 * quat_omega(&w_hat) * s.q,
            v: rot.matrix().transpose() * a_hat - gravity,
            p: s.v,
            q_lin: 0.5 * quat_omega(&w_hat) * s.q_lin,
            v_lin: rot_lin.matrix().transpose() * a_hat - gravity,
            p_lin: s.v_lin,
            phi: f * s.phi,
            qd: f * s.qd + s.qd * f.transpose() + g * qc * g.transpose(),
        }
    };

    let mut st = IntState {
        q: x.rot.quat_xyzw(),
        v: x.vel,
        p: x.pos,
        q_lin: lin.rot.quat_xyzw(),
        v_lin: lin.vel,
        p_lin: lin.pos,
        phi: Mat15::identity(),
        qd: Mat15::zeros(),
    };

    // substep boundaries at sample times clipped to the interval
    let mut knots: Vec<f64> = vec![t0];
    for s in samples {
        if s.stamp > t0 + 1e-12 && s.stamp < t_end - 1e-12 {
            knots.push(s.stamp);
        }
    }
    knots.push(t_end);

    for w in knots.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let h = tb - ta;
        let k1 = deriv(ta, &st);
        let s2 = advance(&st, &k1, 0.5 * h);
        let k2 = deriv(ta + 0.5 * h, &s2);
        let s3 = advance(&st, &k2, 0.5 * h);
        let k3 = deriv(ta + 0.5 * h, &s3);
        let s4 = advance(&st, &k3, h);
        let k4 = deriv(tb, &s4);
        st = IntState {
            q: st.q + h / 6.0 * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q),
            v: st.v + h / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
            p: st.p + h / 6.0 * (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p),
            q_lin: st.q_lin + h / 6.0 * (k1.q_lin + 2.0 * k2.q_lin + 2.0 * k3.q_lin + k4.q_lin),
            v_lin: st.v_lin + h / 6.0 * (k1.v_lin + 2.0 * k2.v_lin + 2.0 * k3.v_lin + k4.v_lin),
            p_lin: st.p_lin + h / 6.0 * (k1.p_lin + 2.0 * k2.p_lin + 2.0 * k3.p_lin + k4.p_lin),
            phi: st.phi + h / 6.0 * (k1.phi + 2.0 * k2.phi + 2.0 * k3.phi + k4.phi),
            qd: st.qd + h / 6.0 * (k1.qd + 2.0 * k2.qd + 2.0 * k3.qd + k4.qd),
        };
        st.q /= st.q.norm();
        st.q_lin /= st.q_lin.norm();
    }

    let out = ImuMean {
        rot: rot_of(&st.q),
        bg: x.bg,
        vel: st.v,
        ba: x.ba,
        pos: st.p,
        stamp: t_end,
    };
    let out_lin = ImuMean {
        rot: rot_of(&st.q_lin),
        bg: x.bg,
        vel: st.v_lin,
        ba: x.ba,
        pos: st.p_lin,
        stamp: t_end,
    };
    let qd = 0.5 * (st.qd + st.qd.transpose());
    Ok((out, st.phi, qd, out_lin))
}

fn advance(s: &IntState, d: &IntDeriv, h: f64) -> IntState {
    IntState {
        q: s.q + h * d.q,
        v: s.v + h * d.v,
        p: s.p + h * d.p,
        q_lin: s.q_lin + h * d.q_lin,
        v_lin: s.v_lin + h * d.v_lin,
        p_lin: s.p_lin + h * d.p_lin,
        phi: s.phi + h * d.phi,
        qd: s.qd + h * d.qd,
    }
}

/// Piecewise-linear interpolation of a sample buffer at `t` (boundary values
/// are held).
pub fn sample_at(buffer: &[ImuSample], t: f64) -> Option<(Vec3, Vec3)> {
    if buffer.is_empty() {
        return None;
    }
    Some(SampleInterp { samples: buffer }.at(t))
}

/// Extract a sample window covering `[t0, t1]` from a time-sorted buffer,
/// interpolating the boundary samples to the exact endpoints.
///
/// Interior gaps up to `3 x nominal_period` are bridged by the linear
/// interpolation (for a single missing sample this is indistinguishable from
/// a held value at this level); larger gaps are reported so the caller can
/// engage failure handling.
pub fn extract_window(
    buffer: &[ImuSample],
    t0: f64,
    t1: f64,
    nominal_period: f64,
) -> Result<Vec<ImuSample>, PropagationError> {
    let max_gap = 3.0 * nominal_period;
    if buffer.is_empty() {
        return Err(PropagationError::SampleGap {
            gap: t1 - t0,
            max: max_gap,
            at: t0,
        });
    }
    let interp = SampleInterp { samples: buffer };
    let mut out = Vec::new();
    let (g0, a0) = interp.at(t0);
    out.push(ImuSample {
        stamp: t0,
        gyro: g0,
        accel: a0,
    });
    let mut prev = t0;
    for s in buffer {
        if s.stamp > t0 + 1e-12 && s.stamp < t1 - 1e-12 {
            if s.stamp - prev > max_gap {
                return Err(PropagationError::SampleGap {
                    gap: s.stamp - prev,
                    max: max_gap,
                    at: prev,
                });
            }
            out.push(*s);
            prev = s.stamp;
        }
    }
    if t1 - prev > max_gap {
        return Err(PropagationError::SampleGap {
            gap: t1 - prev,
            max: max_gap,
            at: prev,
        });
    }
    // zero-order hold past the last buffered sample is implicit in `at`
    let (g1, a1) = interp.at(t1);
    out.push(ImuSample {
        stamp: t1,
        gyro: g1,
        accel: a1,
    });
    Ok(out)
}

/// Joint propagation of every IMU in the state to its own target time, with
/// the block-diagonal covariance update `P <- Phi P Phi^T + Q` where
/// `Phi = Diag(Phi_0 .. Phi_N, I)`: clones, calibration, and features carry
/// identity transition and zero noise, so only IMU rows/columns are touched.
pub fn propagate_joint(
    state: &mut FullState,
    windows: &BTreeMap<ImuId, (Vec<ImuSample>, f64)>,
    gravity: &Vec3,
    noise: &BTreeMap<ImuId, NoiseSpec>,
) -> Result<(), PropagationError> {
    let mut phis: Vec<(ImuId, Mat15, Mat15)> = Vec::new();
    for (&id, (samples, t_end)) in windows {
        let x = state.imus[&id];
        let lin = if state.fej_enabled && std::env::var("DBG_NO_FEJ_PROP").is_err() {
            lin_state_of(state, id)
        } else {
            x
        };
        let (out, phi, qd, _) = integrate_imu(
            &x,
            samples,
            *t_end,
            gravity,
            noise
                .get(&id)
                .copied()
                .as_ref()
                .unwrap_or(&NoiseSpec::default()),
            Some(&lin),
        )?;
        *state.imus.get_mut(&id).unwrap() = out;
        // the IMU's first estimate at the new time is the freshly propagated
        // mean x_{k+1|k}: updates at t_{k+1} will move the mean but not this
        // linearization point, and the next interval linearizes from here
        state.fej_set(EntryKey::ImuTheta(id), EntryValue::Rot(out.rot));
        state.fej_set(EntryKey::ImuVel(id), EntryValue::vec3(out.vel));
        state.fej_set(EntryKey::ImuPos(id), EntryValue::vec3(out.pos));
        state.fej_set(EntryKey::ImuBg(id), EntryValue::vec3(out.bg));
        state.fej_set(EntryKey::ImuBa(id), EntryValue::vec3(out.ba));
        phis.push((id, phi, qd));
    }

    let offs: Vec<(usize, Mat15, Mat15)> = phis
        .iter()
        .map(|(id, phi, qd)| {
            let off = state
                .offset_of(EntryKey::ImuTheta(*id))
                .expect("IMU entry present");
            (off, *phi, *qd)
        })
        .collect();
    {
        let p = state.cov_mut();
        for (off, phi, _) in &offs {
            let phi_d = DMatrix::from_iterator(15, 15, phi.iter().copied());
            let rows = p.rows(*off, 15).into_owned();
            p.rows_mut(*off, 15).copy_from(&(&phi_d * rows));
        }
        for (off, phi, _) in &offs {
            let phi_d = DMatrix::from_iterator(15, 15, phi.iter().copied());
            let cols = p.columns(*off, 15).into_owned();
            p.columns_mut(*off, 15)
                .copy_from(&(cols * phi_d.transpose()));
        }
        for (off, _, qd) in &offs {
            for r in 0..15 {
                for c in 0..15 {
                    p[(off + r, off + c)] += qd[(r, c)];
                }
            }
        }
    }
    state.symmetrize();
    Ok(())
}

/// Linearization state: FEJ values for pose/velocity, current biases.
fn lin_state_of(state: &FullState, id: ImuId) -> ImuMean {
    let cur = state.imus[&id];
    ImuMean {
        rot: state
            .fej_value(EntryKey::ImuTheta(id))
            .map(|v| v.as_rot())
            .unwrap_or(cur.rot),
        bg: cur.bg,
        vel: state
            .fej_value(EntryKey::ImuVel(id))
            .map(|v| v.as_vec3())
            .unwrap_or(cur.vel),
        ba: cur.ba,
        pos: state
            .fej_value(EntryKey::ImuPos(id))
            .map(|v| v.as_vec3())
            .unwrap_or(cur.pos),
        stamp: cur.stamp,
    }
}

pub const GRAVITY_DEFAULT: f64 = 9.81;

pub fn gravity_vector(magnitude: f64) -> Vec3 {
    Vec3::new(0.0, 0.0, magnitude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::tests_support::toy_state;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn still_samples(t0: f64, t1: f64, rate: f64, gravity: f64) -> Vec<ImuSample> {
        let n = ((t1 - t0) * rate).round() as usize;
        (0..=n)
            .map(|i| ImuSample {
                stamp: t0 + i as f64 / rate,
                gyro: Vec3::zeros(),
                accel: Vec3::new(0.0, 0.0, gravity),
            })
            .collect()
    }

    fn base_imu(vel: Vec3) -> ImuMean {
        ImuMean {
            rot: Rotation::identity(),
            bg: Vec3::zeros(),
            vel,
            ba: Vec3::zeros(),
            pos: Vec3::zeros(),
            stamp: 0.0,
        }
    }

    #[test]
    fn constant_velocity_advances_position() {
        let x = base_imu(Vec3::new(2.0, -1.0, 0.5));
        let samples = still_samples(0.0, 1.0, 100.0, GRAVITY_DEFAULT);
        let g = gravity_vector(GRAVITY_DEFAULT);
        let (out, phi, _, _) =
            integrate_imu(&x, &samples, 1.0, &g, &NoiseSpec::default(), None).unwrap();
        assert_abs_diff_eq!(out.pos, Vec3::new(2.0, -1.0, 0.5), epsilon = 1e-10);
        assert_abs_diff_eq!(out.vel, x.vel, epsilon = 1e-10);
        assert_abs_diff_eq!(out.rot.matrix(), Mat3::identity(), epsilon = 1e-10);
        // position-velocity block of Phi is I * dt
        let pv = phi.fixed_view::<3, 3>(12, 6).into_owned();
        assert_abs_diff_eq!(pv, Mat3::identity(), epsilon = 1e-8);
    }

    #[test]
    fn constant_rate_rotation_closed_form() {
        // omega = [0,0,1] rad/s for 1 s from identity, no linear motion: the
        // G->I rotation obeys R_IG(t) = Exp(-omega t) R_IG(0), i.e. the body
        // physically rotates by Exp(omega) about its start.
        let x = base_imu(Vec3::zeros());
        let omega = Vec3::new(0.0, 0.0, 1.0);
        let rate = 200.0;
        let n = 200;
        let samples: Vec<ImuSample> = (0..=n)
            .map(|i| {
                let t = i as f64 / rate;
                let rot = Rotation::exp(&(-omega * t)); // R_IG(t)
                ImuSample {
                    stamp: t,
                    gyro: omega,
                    accel: rot.rotate(&Vec3::new(0.0, 0.0, GRAVITY_DEFAULT)),
                }
            })
            .collect();
        let g = gravity_vector(GRAVITY_DEFAULT);
        let (out, _, _, _) =
            integrate_imu(&x, &samples, 1.0, &g, &NoiseSpec::default(), None).unwrap();
        let expected = Rotation::exp(&-omega); // R_IG(1)
        assert_abs_diff_eq!(out.rot.matrix(), expected.matrix(), epsilon = 1e-8);
        // stationary center: velocity and position stay ~0
        assert!(out.vel.norm() < 1e-7);
        assert!(out.pos.norm() < 1e-7);
    }

    fn rich_samples(rng: &mut StdRng, t0: f64, t1: f64, rate: f64) -> Vec<ImuSample> {
        let n = ((t1 - t0) * rate).round() as usize;
        let w0 = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let a0 = Vec3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(5.0..12.0),
        );
        (0..=n)
            .map(|i| {
                let t = t0 + i as f64 / rate;
                ImuSample {
                    stamp: t,
                    gyro: w0 + Vec3::new((3.0 * t).sin(), (2.0 * t).cos(), t) * 0.3,
                    accel: a0 + Vec3::new(t.cos(), (4.0 * t).sin(), (t * 2.0).cos()) * 0.5,
                }
            })
            .collect()
    }

    fn inject(x: &ImuMean, i: usize, h: f64) -> ImuMean {
        let mut out = *x;
        let mut d = Vec3::zeros();
        d[i % 3] = h;
        match i / 3 {
            0 => out.rot = Rotation::exp(&-d).compose(&x.rot),
            1 => out.bg += d,
            2 => out.vel += d,
            3 => out.ba += d,
            _ => out.pos += d,
        }
        out
    }

    fn error_between(a: &ImuMean, b: &ImuMean) -> SMatrix<f64, 15, 1> {
        // error of a w.r.t. b (b as the reference estimate)
        let mut e = SMatrix::<f64, 15, 1>::zeros();
        let dtheta = -(a.rot.compose(&b.rot.inverse())).log();
        e.fixed_view_mut::<3, 1>(0, 0).copy_from(&dtheta);
        e.fixed_view_mut::<3, 1>(3, 0).copy_from(&(a.bg - b.bg));
        e.fixed_view_mut::<3, 1>(6, 0).copy_from(&(a.vel - b.vel));
        e.fixed_view_mut::<3, 1>(9, 0).copy_from(&(a.ba - b.ba));
        e.fixed_view_mut::<3, 1>(12, 0).copy_from(&(a.pos - b.pos));
        e
    }

    #[test]
    fn transition_matrix_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let g = gravity_vector(GRAVITY_DEFAULT);
        let noise = NoiseSpec::default();
        for _ in 0..5 {
            let samples = rich_samples(&mut rng, 0.0, 0.3, 400.0);
            let mut x = base_imu(Vec3::new(0.3, -0.2, 0.1));
            x.rot = Rotation::exp(&Vec3::new(0.2, -0.4, 0.8));
            x.bg = Vec3::new(0.01, -0.02, 0.005);
            x.ba = Vec3::new(-0.05, 0.02, 0.1);
            let (nominal, phi, _, _) = integrate_imu(&x, &samples, 0.3, &g, &noise, None).unwrap();
            let h = 1e-6;
            for i in 0..15 {
                let xp = inject(&x, i, h);
                let (outp, _, _, _) = integrate_imu(&xp, &samples, 0.3, &g, &noise, None).unwrap();
                let fd = error_between(&outp, &nominal) / h;
                let col = phi.column(i).into_owned();
                let err = (fd - col).norm() / col.norm().max(1.0);
                assert!(err < 1e-3, "column {i}: rel err {err}\nfd {fd}\nphi {col}");
            }
        }
    }

    #[test]
    fn transition_matrix_composes() {
        let mut rng = StdRng::seed_from_u64(23);
        let g = gravity_vector(GRAVITY_DEFAULT);
        let noise = NoiseSpec::default();
        let samples = rich_samples(&mut rng, 0.0, 0.4, 400.0);
        let mut x = base_imu(Vec3::new(1.0, 0.0, -0.5));
        x.rot = Rotation::exp(&Vec3::new(-0.3, 0.5, 0.2));
        let (mid, phi1, _, _) = integrate_imu(&x, &samples, 0.2, &g, &noise, None).unwrap();
        let (_, phi2, _, _) = integrate_imu(&mid, &samples, 0.4, &g, &noise, None).unwrap();
        let (_, phi_full, _, _) = integrate_imu(&x, &samples, 0.4, &g, &noise, None).unwrap();
        assert!(
            (phi2 * phi1 - phi_full).amax() < 1e-8,
            "composition error {}",
            (phi2 * phi1 - phi_full).amax()
        );
        // Phi(t,t) = I
        let (_, phi0, _, _) = integrate_imu(&x, &samples, 0.0, &g, &noise, None).unwrap();
        assert_abs_diff_eq!(phi0, Mat15::identity(), epsilon = 1e-12);
    }

    #[test]
    fn noise_covariance_is_psd_and_grows_trace() {
        let mut rng = StdRng::seed_from_u64(29);
        let g = gravity_vector(GRAVITY_DEFAULT);
        let noise = NoiseSpec::default();
        let samples = rich_samples(&mut rng, 0.0, 0.5, 400.0);
        let x = base_imu(Vec3::zeros());
        let (_, _, qd, _) = integrate_imu(&x, &samples, 0.5, &g, &noise, None).unwrap();
        assert!((qd - qd.transpose()).amax() < 1e-15);
        let eig = nalgebra::SymmetricEigen::new(qd);
        assert!(eig.eigenvalues.min() >= -1e-15);
        assert!(qd.trace() > 0.0);
    }

    #[test]
    fn empty_window_and_bad_timestamps() {
        let x = base_imu(Vec3::zeros());
        let g = gravity_vector(GRAVITY_DEFAULT);
        let (out, phi, qd, _) =
            integrate_imu(&x, &[], x.stamp, &g, &NoiseSpec::default(), None).unwrap();
        assert_abs_diff_eq!(phi, Mat15::identity(), epsilon = 0.0);
        assert_abs_diff_eq!(qd, Mat15::zeros(), epsilon = 0.0);
        assert_eq!(out.stamp, x.stamp);
        let bad = vec![
            ImuSample {
                stamp: 0.1,
                gyro: Vec3::zeros(),
                accel: Vec3::zeros(),
            },
            ImuSample {
                stamp: 0.05,
                gyro: Vec3::zeros(),
                accel: Vec3::zeros(),
            },
        ];
        assert!(integrate_imu(&x, &bad, 0.2, &g, &NoiseSpec::default(), None).is_err());
    }

    #[test]
    fn window_extraction_interpolates_boundaries_and_flags_gaps() {
        let buf: Vec<ImuSample> = (0..100)
            .map(|i| ImuSample {
                stamp: i as f64 * 0.01,
                gyro: Vec3::new(i as f64, 0.0, 0.0),
                accel: Vec3::zeros(),
            })
            .collect();
        let w = extract_window(&buf, 0.015, 0.045, 0.01).unwrap();
        assert_abs_diff_eq!(w[0].stamp, 0.015, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0].gyro.x, 1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(w.last().unwrap().stamp, 0.045, epsilon = 1e-12);
        // cut a hole larger than 3 periods
        let holed: Vec<ImuSample> = buf
            .iter()
            .filter(|s| !(0.02..0.07).contains(&s.stamp))
            .copied()
            .collect();
        assert!(matches!(
            extract_window(&holed, 0.0, 0.09, 0.01),
            Err(PropagationError::SampleGap { .. })
        ));
    }

    #[test]
    fn joint_propagation_reduces_to_single_imu_case() {
        let mut rng = StdRng::seed_from_u64(31);
        let (mut state, _) = toy_state(0, 0.02);
        let g = gravity_vector(GRAVITY_DEFAULT);
        let noise = NoiseSpec::default();
        let samples = rich_samples(&mut rng, 0.0, 0.2, 400.0);
        let x0 = state.imus[&ImuId(0)];
        let (exp_mean, phi, qd, _) = integrate_imu(&x0, &samples, 0.2, &g, &noise, None).unwrap();
        let p0 = state.cov().clone();

        let mut windows = BTreeMap::new();
        windows.insert(ImuId(0), (samples, 0.2));
        let mut noises = BTreeMap::new();
        noises.insert(ImuId(0), noise);
        propagate_joint(&mut state, &windows, &g, &noises).unwrap();

        assert_abs_diff_eq!(state.imus[&ImuId(0)].pos, exp_mean.pos, epsilon = 1e-12);
        let off = state.offset_of(EntryKey::ImuTheta(ImuId(0))).unwrap();
        assert_eq!(off, 0);
        let p_block = p0.view((0, 0), (15, 15)).into_owned();
        let expected = DMatrix::from_iterator(15, 15, phi.iter().copied()) * p_block
            * DMatrix::from_iterator(15, 15, phi.iter().copied()).transpose()
            + DMatrix::from_iterator(15, 15, qd.iter().copied());
        let got = state.cov().view((0, 0), (15, 15)).into_owned();
        assert!((got - expected).amax() < 1e-12);
    }

    #[test]
    fn joint_propagation_matches_dense_oracle_three_imus() {
        let mut rng = StdRng::seed_from_u64(37);
        let (mut state, _) = toy_state(2, 0.05);
        // random symmetric PSD covariance to exercise cross blocks
        let dim = state.dim();
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-0.1..0.1));
        let p_rand = &a * a.transpose();
        state.cov_mut().copy_from(&p_rand);

        let g = gravity_vector(GRAVITY_DEFAULT);
        let mut windows = BTreeMap::new();
        let mut noises = BTreeMap::new();
        let mut phis = Vec::new();
        for id in 0..3u32 {
            let samples = rich_samples(&mut rng, 0.0, 0.15, 400.0);
            let x = state.imus[&ImuId(id)];
            let (_, phi, qd, _) =
                integrate_imu(&x, &samples, 0.15, &g, &NoiseSpec::default(), None).unwrap();
            phis.push((ImuId(id), phi, qd));
            windows.insert(ImuId(id), (samples, 0.15));
            noises.insert(ImuId(id), NoiseSpec::default());
        }

        // dense oracle
        let mut phi_full = DMatrix::identity(dim, dim);
        let mut q_full = DMatrix::zeros(dim, dim);
        for (id, phi, qd) in &phis {
            let off = state.offset_of(EntryKey::ImuTheta(*id)).unwrap();
            for r in 0..15 {
                for c in 0..15 {
                    phi_full[(off + r, off + c)] = phi[(r, c)];
                    q_full[(off + r, off + c)] = qd[(r, c)];
                }
            }
        }
        let expected = &phi_full * &p_rand * phi_full.transpose() + q_full;

        propagate_joint(&mut state, &windows, &g, &noises).unwrap();
        let diff = (state.cov() - &expected).amax();
        assert!(diff < 1e-12, "dense oracle mismatch {diff}");

        // two uncorrelated IMUs stay uncorrelated
        let (mut s2, _) = toy_state(1, 0.05);
        let o1 = s2.offset_of(EntryKey::ImuTheta(ImuId(1))).unwrap();
        // diagonal prior only; cross block starts zero
        let mut w2 = BTreeMap::new();
        w2.insert(ImuId(0), (rich_samples(&mut rng, 0.0, 0.1, 400.0), 0.1));
        w2.insert(ImuId(1), (rich_samples(&mut rng, 0.0, 0.1, 400.0), 0.1));
        propagate_joint(&mut s2, &w2, &g, &noises).unwrap();
        let cross = s2.cov().view((0, o1), (15, 15)).amax();
        assert!(cross < 1e-15, "cross correlation appeared: {cross}");
    }

    #[test]
    fn clone_and_calib_blocks_bitwise_stable_when_uncorrelated() {
        let mut rng = StdRng::seed_from_u64(41);
        let (mut state, clone_id) = toy_state(0, 0.03);
        let coff = state
            .offset_of(EntryKey::CloneTheta(clone_id))
            .unwrap();
        // zero out clone cross blocks so only the diagonal block remains
        let dim = state.dim();
        for r in coff..coff + 6 {
            for c in 0..dim {
                if !(coff..coff + 6).contains(&c) {
                    state.cov_mut()[(r, c)] = 0.0;
                    state.cov_mut()[(c, r)] = 0.0;
                }
            }
        }
        let before = state.cov().view((coff, coff), (6, 6)).into_owned();
        let g = gravity_vector(GRAVITY_DEFAULT);
        let mut windows = BTreeMap::new();
        windows.insert(ImuId(0), (rich_samples(&mut rng, 0.0, 0.1, 400.0), 0.1));
        let noises = BTreeMap::new();
        propagate_joint(&mut state, &windows, &g, &noises).unwrap();
        let after = state.cov().view((coff, coff), (6, 6)).into_owned();
        assert_eq!(before, after);
    }
}
