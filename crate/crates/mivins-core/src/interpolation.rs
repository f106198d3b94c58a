//! On-manifold pose interpolation between clones: linear (constant-velocity)
//! and polynomial of arbitrary order, with the analytical Jacobians of the
//! interpolated pose with respect to every source clone and the query time.
//!
//! Orientation is fitted through `R(t) = Exp(sum_i a_i dt^i) R(t0)` and
//! position through an ordinary vector polynomial anchored at `t0`, the
//! oldest fitted pose. Attitude errors follow the crate convention
//! `R = Exp(-theta) R_hat`.

use nalgebra::{DMatrix, DVector, Matrix6};

use crate::manifold::{left_jacobian, left_jacobian_inv, Mat3, Rotation, Vec3};
use crate::Pose;

#[derive(Debug, thiserror::Error)]
pub enum InterpError {
    #[error("need {needed} poses for order {order}, got {got}")]
    WrongCount { needed: usize, got: usize, order: usize },
    #[error("duplicate or non-increasing times (dt = {0:.3e})")]
    DegenerateTimes(f64),
    #[error("Vandermonde matrix ill-conditioned (cond = {0:.3e})")]
    IllConditioned(f64),
}

/// Linear on-manifold interpolation between two timed poses.
///
/// Extrapolation is allowed; the returned flag is set when `t` lies beyond
/// 1.5x the interval on either side.
pub fn interp_linear(
    pose1: &Pose,
    pose2: &Pose,
    t1: f64,
    t2: f64,
    t: f64,
) -> Result<(Pose, bool), InterpError> {
    if t2 - t1 <= 0.0 {
        return Err(InterpError::DegenerateTimes(t2 - t1));
    }
    let lambda = (t - t1) / (t2 - t1);
    let flagged = !(-0.5..=1.5).contains(&lambda);
    let dphi = pose2.rot.compose(&pose1.rot.inverse()).log();
    let rot = Rotation::exp(&(lambda * dphi)).compose(&pose1.rot);
    let pos = (1.0 - lambda) * pose1.pos + lambda * pose2.pos;
    Ok((Pose::new(rot, pos), flagged))
}

/// Polynomial pose interpolant fitted exactly through `n + 1` timed poses.
#[derive(Debug, Clone)]
pub struct PosePolynomial {
    pub order: usize,
    pub anchor_time: f64,
    pub anchor: Pose,
    /// Source times, anchor first (index 0), strictly increasing.
    pub times: Vec<f64>,
    /// Cached relative rotation vectors `dphi_k = Log(R_k R_0^T)`, k = 1..=n.
    delta_phi: Vec<Vec3>,
    /// Orientation and position coefficients in rescaled time units.
    coeff_theta: Vec<Vec3>,
    coeff_pos: Vec<Vec3>,
    /// Inverse of the rescaled (scalar) Vandermonde matrix.
    v_inv: DMatrix<f64>,
    /// Time rescale factor so that max |dt_k| = 1.
    scale: f64,
}

/// Full Jacobian set of one interpolated pose. Rows are ordered
/// `(theta, p)`; `source` index 0 is the anchor clone.
#[derive(Debug, Clone)]
pub struct InterpJacobians {
    pub source: Vec<Matrix6<f64>>,
    /// d(pose error)/d(query-time error), e.g. a camera time-offset column.
    pub time: nalgebra::SMatrix<f64, 6, 1>,
}

impl PosePolynomial {
    /// Fit an order-`n` polynomial through `n + 1` (time, pose) knots given
    /// oldest first. Times are rescaled internally so the Vandermonde system
    /// is solved with `max |dt_k| = 1`; fits whose rescaled condition number
    /// exceeds `1e8` are rejected.
    pub fn fit(knots: &[(f64, Pose)], order: usize) -> Result<Self, InterpError> {
        let n = order;
        if knots.len() != n + 1 {
            return Err(InterpError::WrongCount {
                needed: n + 1,
                got: knots.len(),
                order: n,
            });
        }
        let t0 = knots[0].0;
        let anchor = knots[0].1;
        let mut scale: f64 = 0.0;
        for w in knots.windows(2) {
            let dt = w[1].0 - w[0].0;
            if dt <= 1e-12 {
                return Err(InterpError::DegenerateTimes(dt));
            }
        }
        for (tk, _) in &knots[1..] {
            scale = scale.max((tk - t0).abs());
        }

        // scalar Vandermonde in rescaled time
        let mut v = DMatrix::zeros(n, n);
        for (k, (tk, _)) in knots[1..].iter().enumerate() {
            let tau = (tk - t0) / scale;
            let mut p = tau;
            for i in 0..n {
                v[(k, i)] = p;
                p *= tau;
            }
        }
        let svd = v.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if cond > 1e8 {
            return Err(InterpError::IllConditioned(cond));
        }
        let v_inv = v.try_inverse().ok_or(InterpError::IllConditioned(cond))?;

        let mut delta_phi = Vec::with_capacity(n);
        let mut dphi_stack = DMatrix::zeros(n, 3);
        let mut dpos_stack = DMatrix::zeros(n, 3);
        for (k, (_, pose_k)) in knots[1..].iter().enumerate() {
            let dphi = pose_k.rot.compose(&anchor.rot.inverse()).log();
            let dpos = pose_k.pos - anchor.pos;
            delta_phi.push(dphi);
            for c in 0..3 {
                dphi_stack[(k, c)] = dphi[c];
                dpos_stack[(k, c)] = dpos[c];
            }
        }
        let a_theta = &v_inv * dphi_stack;
        let a_pos = &v_inv * dpos_stack;
        let row_vec = |m: &DMatrix<f64>, r: usize| Vec3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)]);
        Ok(PosePolynomial {
            order: n,
            anchor_time: t0,
            anchor,
            times: knots.iter().map(|(t, _)| *t).collect(),
            delta_phi,
            coeff_theta: (0..n).map(|r| row_vec(&a_theta, r)).collect(),
            coeff_pos: (0..n).map(|r| row_vec(&a_pos, r)).collect(),
            v_inv,
            scale,
        })
    }

    /// Powers `tau^1 .. tau^n` of the rescaled query offset.
    fn powers(&self, t: f64) -> Vec<f64> {
        let tau = (t - self.anchor_time) / self.scale;
        let mut p = Vec::with_capacity(self.order);
        let mut acc = 1.0;
        for _ in 0..self.order {
            acc *= tau;
            p.push(acc);
        }
        p
    }

    /// Orientation increment `A_theta(t)` of the fitted rotation polynomial.
    fn a_theta(&self, t: f64) -> Vec3 {
        let pw = self.powers(t);
        self.coeff_theta.iter().zip(&pw).map(|(a, p)| a * *p).sum()
    }

    pub fn eval(&self, t: f64) -> Pose {
        let pw = self.powers(t);
        let a_theta = self.a_theta(t);
        let dpos: Vec3 = self.coeff_pos.iter().zip(&pw).map(|(a, p)| a * *p).sum();
        Pose::new(
            Rotation::exp(&a_theta).compose(&self.anchor.rot),
            self.anchor.pos + dpos,
        )
    }

    /// Interpolation weights `u_k = m(t) V^{-1}` (dimensionless), one per
    /// non-anchor knot.
    fn weights(&self, t: f64) -> DVector<f64> {
        let pw = DVector::from_vec(self.powers(t));
        self.v_inv.transpose() * pw
    }

    /// `sum_i i dt^{i-1} a_i` in true time units: the time derivative of the
    /// coefficient chain used for the offset/readout columns.
    fn dcoeff_dt(&self, t: f64, coeff: &[Vec3]) -> Vec3 {
        let tau = (t - self.anchor_time) / self.scale;
        let mut acc = Vec3::zeros();
        let mut p = 1.0; // tau^{i-1}
        for (i, a) in coeff.iter().enumerate() {
            acc += (i + 1) as f64 * p * a;
            p *= tau;
        }
        acc / self.scale
    }

    /// Analytic Jacobians of the interpolated pose error w.r.t. each source
    /// clone's pose error and the query time.
    pub fn jacobians(&self, t: f64) -> InterpJacobians {
        let n = self.order;
        let u = self.weights(t);
        let a_hat = self.a_theta(t);
        let jl_a = left_jacobian(&a_hat);
        let exp_a = Rotation::exp(&a_hat).matrix();

        let mut source = vec![Matrix6::zeros(); n + 1];

        // anchor orientation: -J_l(A) sum_k u_k J_l^{-1}(dphi_k) M_k + Exp(A)
        let mut acc = Mat3::zeros();
        for k in 0..n {
            let m_k = Rotation::exp(&self.delta_phi[k]).matrix();
            acc += u[k] * left_jacobian_inv(&self.delta_phi[k]) * m_k;
        }
        let j_theta_anchor = -jl_a * acc + exp_a;
        // anchor position: (1 - sum u_k) I
        let wsum: f64 = u.iter().sum();
        source[0].view_mut((0, 0), (3, 3)).copy_from(&j_theta_anchor);
        source[0]
            .view_mut((3, 3), (3, 3))
            .copy_from(&((1.0 - wsum) * Mat3::identity()));

        for k in 0..n {
            // non-anchor orientation: u_k J_l(A) J_l^{-1}(dphi_k)
            let j_theta = u[k] * jl_a * left_jacobian_inv(&self.delta_phi[k]);
            source[k + 1].view_mut((0, 0), (3, 3)).copy_from(&j_theta);
            source[k + 1]
                .view_mut((3, 3), (3, 3))
                .copy_from(&(u[k] * Mat3::identity()));
        }

        let mut time = nalgebra::SMatrix::<f64, 6, 1>::zeros();
        let dtheta_dt = -jl_a * self.dcoeff_dt(t, &self.coeff_theta);
        let dpos_dt = self.dcoeff_dt(t, &self.coeff_pos);
        time.view_mut((0, 0), (3, 1)).copy_from(&dtheta_dt);
        time.view_mut((3, 0), (3, 1)).copy_from(&dpos_dt);

        InterpJacobians { source, time }
    }
}

/// Knot window selection: returns the start index of `n + 1` consecutive
/// knots placing the query segment in the middle of the window
/// (`ceil((n+1)/2)` knots at or before `t`, the rest after), falling back to
/// the earliest/latest window at the edges. `times` must be sorted.
pub fn select_knots(times: &[f64], t: f64, order: usize) -> Option<usize> {
    let need = order + 1;
    if times.len() < need {
        return None;
    }
    let before_target = need.div_ceil(2);
    let n_before = times.partition_point(|&x| x <= t);
    let start = n_before.saturating_sub(before_target);
    Some(start.min(times.len() - need))
}
