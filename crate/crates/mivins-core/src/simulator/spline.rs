//! Continuous-time trajectory: a uniform cumulative cubic B-spline on
//! SO(3) x R^3 with analytic pose, velocity, acceleration, angular rate, and
//! angular acceleration queries.
//!
//! Control poses are taken directly from the uniformly sampled input, so the
//! spline approximates (does not interpolate) the samples; at sane sampling
//! densities the smoothing error is far below the fit tolerance.

use crate::manifold::{skew, Mat3, Rotation, Vec3};
use crate::Pose;

#[derive(Debug, thiserror::Error)]
pub enum SplineError {
    #[error("need at least 8 poses, got {0}")]
    TooFewPoses(usize),
    #[error("non-uniform sample times (dt {got:.6} vs {expected:.6} at index {index})")]
    NonUniform { expected: f64, got: f64, index: usize },
    #[error("query time {0:.4} outside spline support [{1:.4}, {2:.4}]")]
    OutOfSupport(f64, f64, f64),
}

/// Body-frame kinematics of the spline at one instant.
#[derive(Debug, Clone, Copy)]
pub struct SplineKinematics {
    pub pose: Pose,
    /// Global-frame linear velocity and acceleration.
    pub vel: Vec3,
    pub accel: Vec3,
    /// Body-frame angular rate and angular acceleration.
    pub omega: Vec3,
    pub alpha: Vec3,
}

#[derive(Debug, Clone)]
pub struct TrajectorySpline {
    t0: f64,
    dt: f64,
    /// Control rotations as body-to-global (`R_GI`).
    rots: Vec<Rotation>,
    poss: Vec<Vec3>,
}

impl TrajectorySpline {
    /// Fit to uniformly sampled timed poses (at least 8). `poses[i].1` uses
    /// the crate pose convention (rotation maps global into body).
    pub fn fit(poses: &[(f64, Pose)]) -> Result<Self, SplineError> {
        if poses.len() < 8 {
            return Err(SplineError::TooFewPoses(poses.len()));
        }
        let dt = poses[1].0 - poses[0].0;
        for (i, w) in poses.windows(2).enumerate() {
            let got = w[1].0 - w[0].0;
            if (got - dt).abs() > 1e-6 * dt.max(1e-9) {
                return Err(SplineError::NonUniform {
                    expected: dt,
                    got,
                    index: i + 1,
                });
            }
        }
        Ok(TrajectorySpline {
            t0: poses[0].0,
            dt,
            rots: poses.iter().map(|(_, p)| p.rot.inverse()).collect(),
            poss: poses.iter().map(|(_, p)| p.pos).collect(),
        })
    }

    /// Valid query interval.
    pub fn support(&self) -> (f64, f64) {
        (
            self.t0 + self.dt,
            self.t0 + (self.rots.len() as f64 - 2.0) * self.dt,
        )
    }

    fn segment(&self, t: f64) -> Result<(usize, f64), SplineError> {
        let (lo, hi) = self.support();
        if t < lo - 1e-9 || t > hi + 1e-9 {
            return Err(SplineError::OutOfSupport(t, lo, hi));
        }
        let s = ((t - self.t0) / self.dt).floor() as usize;
        let s = s.clamp(1, self.rots.len() - 3);
        let u = (t - (self.t0 + s as f64 * self.dt)) / self.dt;
        Ok((s, u))
    }

    pub fn pose(&self, t: f64) -> Result<Pose, SplineError> {
        Ok(self.kinematics(t)?.pose)
    }

    /// Pose and all first/second derivatives at `t`.
    pub fn kinematics(&self, t: f64) -> Result<SplineKinematics, SplineError> {
        let (i, u) = self.segment(t)?;
        let c = [i - 1, i, i + 1, i + 2];

        // cumulative cubic basis and derivatives (in u; time scaled below)
        let l1 = (5.0 + 3.0 * u - 3.0 * u * u + u * u * u) / 6.0;
        let l2 = (1.0 + 3.0 * u + 3.0 * u * u - 2.0 * u * u * u) / 6.0;
        let l3 = u * u * u / 6.0;
        let d1 = (1.0 - u) * (1.0 - u) / 2.0 / self.dt;
        let d2 = (1.0 + 2.0 * u - 2.0 * u * u) / 2.0 / self.dt;
        let d3 = u * u / 2.0 / self.dt;
        let dd1 = (u - 1.0) / (self.dt * self.dt);
        let dd2 = (1.0 - 2.0 * u) / (self.dt * self.dt);
        let dd3 = u / (self.dt * self.dt);
        let l = [l1, l2, l3];
        let ld = [d1, d2, d3];
        let ldd = [dd1, dd2, dd3];

        // position chain
        let mut pos = self.poss[c[0]];
        let mut vel = Vec3::zeros();
        let mut accel = Vec3::zeros();
        for j in 0..3 {
            let d = self.poss[c[j + 1]] - self.poss[c[j]];
            pos += l[j] * d;
            vel += ld[j] * d;
            accel += ldd[j] * d;
        }

        // orientation chain: R_GI = C A1 A2 A3
        let mut omega_m = [Mat3::zeros(); 3];
        let mut a_m = [Mat3::identity(); 3];
        let mut ad_m = [Mat3::zeros(); 3];
        let mut add_m = [Mat3::zeros(); 3];
        for j in 0..3 {
            let om = self.rots[c[j]]
                .inverse()
                .compose(&self.rots[c[j + 1]])
                .log();
            let ox = skew(&om);
            let aj = Rotation::exp(&(l[j] * om)).matrix();
            omega_m[j] = ox;
            a_m[j] = aj;
            ad_m[j] = ld[j] * aj * ox;
            add_m[j] = ldd[j] * aj * ox + ld[j] * ld[j] * aj * ox * ox;
        }
        let c0 = self.rots[c[0]].matrix();
        let r = c0 * a_m[0] * a_m[1] * a_m[2];
        let rd = c0
            * (ad_m[0] * a_m[1] * a_m[2] + a_m[0] * ad_m[1] * a_m[2] + a_m[0] * a_m[1] * ad_m[2]);
        let rdd = c0
            * (add_m[0] * a_m[1] * a_m[2]
                + a_m[0] * add_m[1] * a_m[2]
                + a_m[0] * a_m[1] * add_m[2]
                + 2.0 * (ad_m[0] * ad_m[1] * a_m[2]
                    + ad_m[0] * a_m[1] * ad_m[2]
                    + a_m[0] * ad_m[1] * ad_m[2]));

        // omega = vee(R^T R_dot); alpha from R_ddot = R_dot [w x] + R [al x]
        let skew_w = skew_part(&(r.transpose() * rd));
        let omega = Vec3::new(skew_w[(2, 1)], skew_w[(0, 2)], skew_w[(1, 0)]);
        let skew_a = skew_part(&(r.transpose() * (rdd - rd * skew(&omega))));
        let alpha = Vec3::new(skew_a[(2, 1)], skew_a[(0, 2)], skew_a[(1, 0)]);

        Ok(SplineKinematics {
            pose: Pose::new(Rotation::from_matrix(&r).inverse(), pos),
            vel,
            accel,
            omega,
            alpha,
        })
    }
}

/// Antisymmetric projection (kills numerical junk before extracting a vee).
fn skew_part(m: &Mat3) -> Mat3 {
    0.5 * (m - m.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fit_fn(
        f: impl Fn(f64) -> Pose,
        t0: f64,
        t1: f64,
        rate: f64,
    ) -> (TrajectorySpline, Vec<(f64, Pose)>) {
        let n = ((t1 - t0) * rate).round() as usize;
        let poses: Vec<(f64, Pose)> = (0..=n)
            .map(|i| {
                let t = t0 + i as f64 / rate;
                (t, f(t))
            })
            .collect();
        (TrajectorySpline::fit(&poses).unwrap(), poses)
    }

    #[test]
    fn constant_pose_is_constant_with_zero_derivatives() {
        let pose = Pose::new(
            Rotation::exp(&Vec3::new(0.3, -0.2, 0.9)),
            Vec3::new(1.0, 2.0, 3.0),
        );
        let (spline, _) = fit_fn(|_| pose, 0.0, 2.0, 20.0);
        for t in [0.1, 0.5, 1.0, 1.7] {
            let k = spline.kinematics(t).unwrap();
            assert_abs_diff_eq!(k.pose.pos, pose.pos, epsilon = 1e-12);
            assert_abs_diff_eq!(k.pose.rot.matrix(), pose.rot.matrix(), epsilon = 1e-12);
            assert!(k.vel.norm() < 1e-10);
            assert!(k.accel.norm() < 1e-9);
            assert!(k.omega.norm() < 1e-10);
            assert!(k.alpha.norm() < 1e-9);
        }
    }

    #[test]
    fn constant_velocity_line_exact() {
        let v = Vec3::new(0.7, -0.3, 0.2);
        let (spline, _) = fit_fn(
            |t| Pose::new(Rotation::identity(), v * t),
            0.0,
            3.0,
            20.0,
        );
        for t in [0.2, 1.1, 2.3] {
            let k = spline.kinematics(t).unwrap();
            assert_abs_diff_eq!(k.pose.pos, v * t, epsilon = 1e-10);
            assert_abs_diff_eq!(k.vel, v, epsilon = 1e-10);
            assert!(k.accel.norm() < 1e-9);
        }
    }

    #[test]
    fn errors_on_bad_input() {
        let pose = Pose::identity();
        let few: Vec<(f64, Pose)> = (0..5).map(|i| (i as f64, pose)).collect();
        assert!(matches!(
            TrajectorySpline::fit(&few),
            Err(SplineError::TooFewPoses(5))
        ));
        let mut bad: Vec<(f64, Pose)> = (0..10).map(|i| (i as f64 * 0.1, pose)).collect();
        bad[4].0 += 0.03;
        assert!(matches!(
            TrajectorySpline::fit(&bad),
            Err(SplineError::NonUniform { .. })
        ));
        let (spline, _) = fit_fn(|_| pose, 0.0, 1.0, 10.0);
        assert!(spline.pose(-5.0).is_err());
        assert!(spline.pose(50.0).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences_of_pose_query() {
        // figure-8-like motion with sinusoidal attitude
        let f = |t: f64| {
            let w = 0.8;
            let pos = Vec3::new(3.0 * (w * t).sin(), 1.5 * (2.0 * w * t).sin(), 0.4 * (w * t).cos());
            let rot = Rotation::exp(&Vec3::new(
                0.3 * (1.3 * t).sin(),
                0.4 * (0.9 * t).cos(),
                1.2 * (0.5 * t).sin(),
            ));
            Pose::new(rot, pos)
        };
        let (spline, _) = fit_fn(f, 0.0, 10.0, 100.0);
        let h = 1e-5;
        for t in [1.0, 3.3, 5.7, 8.2] {
            let k = spline.kinematics(t).unwrap();
            let pp = spline.pose(t + h).unwrap();
            let pm = spline.pose(t - h).unwrap();
            let fd_vel = (pp.pos - pm.pos) / (2.0 * h);
            assert!((fd_vel - k.vel).norm() / k.vel.norm().max(1.0) < 1e-4);
            let vp = spline.kinematics(t + h).unwrap().vel;
            let vm = spline.kinematics(t - h).unwrap().vel;
            let fd_acc = (vp - vm) / (2.0 * h);
            assert!((fd_acc - k.accel).norm() / k.accel.norm().max(1.0) < 1e-4);
            // omega: R_GI^T R_GI_dot via FD of the pose query
            let r_gi_p = pp.rot.inverse().matrix();
            let r_gi_m = pm.rot.inverse().matrix();
            let r_gi = spline.pose(t).unwrap().rot.inverse().matrix();
            let rd = (r_gi_p - r_gi_m) / (2.0 * h);
            let w_fd = skew_part(&(r_gi.transpose() * rd));
            let w_fd = Vec3::new(w_fd[(2, 1)], w_fd[(0, 2)], w_fd[(1, 0)]);
            assert!((w_fd - k.omega).norm() / k.omega.norm().max(1.0) < 1e-4);
            // alpha via FD of omega
            let wp = spline.kinematics(t + h).unwrap().omega;
            let wm = spline.kinematics(t - h).unwrap().omega;
            let a_fd = (wp - wm) / (2.0 * h);
            assert!((a_fd - k.alpha).norm() / k.alpha.norm().max(1.0) < 1e-4);
        }
    }

    #[test]
    fn fit_reproduces_samples_within_tolerance() {
        let f = |t: f64| {
            let w = 0.6;
            Pose::new(
                Rotation::exp(&Vec3::new(0.2 * (w * t).sin(), 0.3 * (w * t).cos(), 0.8 * t * w)),
                Vec3::new((w * t).sin() * 2.0, (w * t).cos(), 0.3 * t),
            )
        };
        let (spline, poses) = fit_fn(f, 0.0, 8.0, 100.0);
        let (lo, hi) = spline.support();
        for (t, pose) in &poses {
            if *t < lo || *t > hi {
                continue;
            }
            let got = spline.pose(*t).unwrap();
            assert!((got.pos - pose.pos).norm() < 1e-3, "pos err at {t}");
            let ang = got.rot.compose(&pose.rot.inverse()).log().norm();
            assert!(ang < 0.1_f64.to_radians(), "rot err {ang} at {t}");
        }
    }
}
