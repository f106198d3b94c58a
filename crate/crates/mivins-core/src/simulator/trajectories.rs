//! Built-in analytic trajectories (figure-eight and spiral), with
//! sinusoidal attitude excitation on all three axes. These stand in for
//! recorded pose files at desk scale; external pose files are supported
//! through the same spline fit.

use super::spline::TrajectorySpline;
use crate::manifold::{Rotation, Vec3};
use crate::Pose;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    FigureEight,
    Spiral,
}

/// Closed-form trajectory: position pattern plus Euler-sinusoid attitude.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnalyticTrajectory {
    pub kind: TrajectoryKind,
    /// Position amplitudes (m) and base angular frequency (rad/s).
    pub amp: [f64; 3],
    pub freq: f64,
    /// Attitude amplitudes (rad) and frequencies (rad/s) for yaw/pitch/roll.
    pub att_amp: [f64; 3],
    pub att_freq: [f64; 3],
    /// Hold the start pose for this long before moving (s); the ramp into
    /// motion is smoothed over one second.
    pub hold_start: f64,
}

impl AnalyticTrajectory {
    pub fn figure_eight() -> Self {
        AnalyticTrajectory {
            kind: TrajectoryKind::FigureEight,
            amp: [3.0, 1.5, 0.4],
            freq: 2.0 * std::f64::consts::PI / 12.0,
            att_amp: [1.2, 0.3, 0.3],
            att_freq: [0.45, 0.7, 0.9],
            hold_start: 0.0,
        }
    }

    pub fn spiral() -> Self {
        AnalyticTrajectory {
            kind: TrajectoryKind::Spiral,
            amp: [2.5, 2.5, 0.15],
            freq: 2.0 * std::f64::consts::PI / 10.0,
            att_amp: [0.8, 0.25, 0.25],
            att_freq: [0.5, 0.8, 1.1],
            hold_start: 0.0,
        }
    }

    /// High-dynamics profile: fast rotation rates, for rolling-shutter and
    /// interpolation-order studies.
    pub fn figure_eight_fast() -> Self {
        AnalyticTrajectory {
            kind: TrajectoryKind::FigureEight,
            amp: [2.5, 1.2, 0.3],
            freq: 2.0 * std::f64::consts::PI / 8.0,
            att_amp: [1.5, 0.5, 0.5],
            att_freq: [1.5, 2.0, 2.4],
            hold_start: 0.0,
        }
    }

    /// Time warp implementing the start hold with a C1 ramp of one second.
    fn warp(&self, t: f64) -> f64 {
        let hold = self.hold_start;
        if hold <= 0.0 {
            return t;
        }
        let ramp = 1.0;
        if t <= hold {
            0.0
        } else if t <= hold + ramp {
            let s = t - hold;
            s * s / (2.0 * ramp)
        } else {
            t - hold - ramp / 2.0
        }
    }

    /// Closed-form pose at time `t` (crate convention: rotation maps global
    /// into body).
    pub fn pose(&self, t: f64) -> Pose {
        let tau = self.warp(t);
        let w = self.freq;
        let pos = match self.kind {
            TrajectoryKind::FigureEight => Vec3::new(
                self.amp[0] * (w * tau).sin(),
                self.amp[1] * (2.0 * w * tau).sin(),
                self.amp[2] * (w * tau).cos(),
            ),
            TrajectoryKind::Spiral => Vec3::new(
                self.amp[0] * (w * tau).cos() - self.amp[0],
                self.amp[1] * (w * tau).sin(),
                self.amp[2] * tau,
            ),
        };
        let yaw = self.att_amp[0] * (self.att_freq[0] * tau).sin();
        let pitch = self.att_amp[1] * (self.att_freq[1] * tau + 1.0).sin();
        let roll = self.att_amp[2] * (self.att_freq[2] * tau + 2.0).sin();
        let r_gi = Rotation::exp(&Vec3::new(0.0, 0.0, yaw))
            .compose(&Rotation::exp(&Vec3::new(0.0, pitch, 0.0)))
            .compose(&Rotation::exp(&Vec3::new(roll, 0.0, 0.0)));
        Pose::new(r_gi.inverse(), pos)
    }

    /// Sample and fit the ground-truth spline with half a second of margin
    /// on both ends so sensor clock offsets stay inside the support.
    pub fn to_spline(&self, duration: f64) -> TrajectorySpline {
        let rate = 200.0;
        let t0 = -1.0;
        let t1 = duration + 1.0;
        let n = ((t1 - t0) * rate).round() as usize;
        let poses: Vec<(f64, Pose)> = (0..=n)
            .map(|i| {
                let t = t0 + i as f64 / rate;
                (t, self.pose(t))
            })
            .collect();
        TrajectorySpline::fit(&poses).expect("analytic trajectory fits")
    }
}
