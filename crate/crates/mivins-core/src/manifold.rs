//! SO(3) toolbox: rotations, quaternions, exponential/logarithm maps and the
//! left Jacobian.
//!
//! Quaternion convention
//! ---------------------
//! We use JPL quaternions (scalar-last, `[x y z w]`) throughout, following
//! Trawny & Roumeliotis, "Indirect Kalman Filter for 3D Attitude Estimation".
//! The rotation matrix of a quaternion is
//!
//! ```text
//! C(q) = (2w^2 - 1) I - 2 w [q_v x] + 2 q_v q_v^T
//! ```
//!
//! and quaternion multiplication satisfies `C(a ⊗ b) = C(a) C(b)`. A state
//! quaternion written `q_IG` has `C(q_IG)` mapping global-frame vectors into
//! the local (IMU/camera) frame.
//!
//! The attitude error is multiplicative: `dq = q ⊗ q_hat^{-1} ≈ [theta/2; 1]`,
//! equivalently in matrix form
//!
//! ```text
//! C(q) = Exp(-theta) * C(q_hat)
//! ```
//!
//! where `Exp` is the standard Rodrigues matrix exponential (so `Exp(v)` for
//! `v = [pi/2, 0, 0]` actively rotates y-hat onto z-hat). Every Jacobian in
//! this crate is written against this error definition; see the sign tests at
//! the bottom of this file before changing anything.

use nalgebra::{Matrix3, Vector3, Vector4};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec4 = Vector4<f64>;

/// Below this angle `exp` switches to its Taylor series.
const EXP_SMALL_ANGLE: f64 = 1e-7;
/// Below this angle the left Jacobian switches to its Taylor series.
const JACOBIAN_SMALL_ANGLE: f64 = 1e-5;

/// Skew-symmetric (cross-product) matrix of a 3-vector: `skew(v) * w = v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]. Rejects matrices that are not skew-symmetric to
/// within `1e-8` (scaled by the matrix magnitude), which signals corrupted
/// input rather than silently averaging it away.
pub fn vee(m: &Mat3) -> Result<Vec3, ManifoldError> {
    let scale = m.amax().max(1.0);
    let sym = 0.5 * (m + m.transpose());
    if sym.amax() > 1e-8 * scale {
        return Err(ManifoldError::NotSkewSymmetric {
            asymmetry: sym.amax(),
        });
    }
    Ok(Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

#[derive(Debug, thiserror::Error)]
pub enum ManifoldError {
    #[error("matrix is not skew-symmetric (symmetric part {asymmetry:.3e})")]
    NotSkewSymmetric { asymmetry: f64 },
}

/// An element of SO(3), stored as a unit JPL quaternion (scalar last).
///
/// `matrix()` returns `C(q)`; composition is matrix composition. The
/// quaternion is renormalized after every composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    // [x, y, z, w], unit norm
    q: Vec4,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            q: Vec4::new(0.0, 0.0, 0.0, 1.0),
        }
    }

    /// Build from JPL quaternion components `[x y z w]`. Normalizes (skipped
    /// when already unit to 1e-12, keeping exact values bit-stable), and
    /// flips the sign so that `w >= 0` (the two antipodal quaternions encode
    /// the same rotation).
    pub fn from_quat_xyzw(q: Vec4) -> Self {
        let n2 = q.norm_squared();
        let mut q = if (n2 - 1.0).abs() > 1e-12 {
            q / n2.sqrt()
        } else {
            q
        };
        if q.w < 0.0 {
            q = -q;
        }
        Rotation { q }
    }

    /// JPL quaternion components `[x y z w]`.
    pub fn quat_xyzw(&self) -> Vec4 {
        self.q
    }

    /// Vector (imaginary) part of the quaternion.
    pub fn quat_vec(&self) -> Vec3 {
        self.q.fixed_rows::<3>(0).into_owned()
    }

    /// Rotation matrix `C(q)` per the module convention.
    pub fn matrix(&self) -> Mat3 {
        let qv = self.quat_vec();
        let w = self.q.w;
        (2.0 * w * w - 1.0) * Mat3::identity() - 2.0 * w * skew(&qv)
            + 2.0 * qv * qv.transpose()
    }

    /// Convert a rotation matrix to a quaternion using Shepperd's method
    /// (largest-diagonal branch for numerical stability near pi).
    pub fn from_matrix(m: &Mat3) -> Self {
        let tr = m.trace();
        // candidates: 4w^2-1 = tr, 4x^2-1 = 2m00-tr, ...
        let cand = [
            2.0 * m[(0, 0)] - tr,
            2.0 * m[(1, 1)] - tr,
            2.0 * m[(2, 2)] - tr,
            tr,
        ];
        let (imax, _) = cand
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let mut q = Vec4::zeros();
        match imax {
            3 => {
                let w = 0.5 * (1.0 + tr).sqrt();
                q.w = w;
                // C = (2w^2-1)I - 2w[qv x] + 2 qv qv^T  =>  off-diagonal
                // differences isolate the skew term: C21-C12 = -4 w qx ... no:
                // [qv x] contributes -2w * skew, so C(1,2)-C(2,1) = 4 w qx.
                q.x = (m[(1, 2)] - m[(2, 1)]) / (4.0 * w);
                q.y = (m[(2, 0)] - m[(0, 2)]) / (4.0 * w);
                q.z = (m[(0, 1)] - m[(1, 0)]) / (4.0 * w);
            }
            0 => {
                let x = 0.5 * (1.0 + 2.0 * m[(0, 0)] - tr).sqrt();
                q.x = x;
                q.w = (m[(1, 2)] - m[(2, 1)]) / (4.0 * x);
                q.y = (m[(0, 1)] + m[(1, 0)]) / (4.0 * x);
                q.z = (m[(2, 0)] + m[(0, 2)]) / (4.0 * x);
            }
            1 => {
                let y = 0.5 * (1.0 + 2.0 * m[(1, 1)] - tr).sqrt();
                q.y = y;
                q.w = (m[(2, 0)] - m[(0, 2)]) / (4.0 * y);
                q.x = (m[(0, 1)] + m[(1, 0)]) / (4.0 * y);
                q.z = (m[(1, 2)] + m[(2, 1)]) / (4.0 * y);
            }
            _ => {
                let z = 0.5 * (1.0 + 2.0 * m[(2, 2)] - tr).sqrt();
                q.z = z;
                q.w = (m[(0, 1)] - m[(1, 0)]) / (4.0 * z);
                q.x = (m[(2, 0)] + m[(0, 2)]) / (4.0 * z);
                q.y = (m[(1, 2)] + m[(2, 1)]) / (4.0 * z);
            }
        }
        Rotation::from_quat_xyzw(q)
    }

    /// Group composition: `(a * b).matrix() == a.matrix() * b.matrix()`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        quat_multiply(self, other)
    }

    pub fn inverse(&self) -> Rotation {
        quat_inverse(self)
    }

    /// Transpose view: same as `inverse` for SO(3).
    pub fn transpose(&self) -> Rotation {
        self.inverse()
    }

    /// Apply to a vector: `self.matrix() * v`.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let qv = self.quat_vec();
        let w = self.q.w;
        (2.0 * w * w - 1.0) * v - 2.0 * w * qv.cross(v) + 2.0 * qv * (qv.dot(v))
    }

    /// Apply the inverse rotation: `self.matrix().transpose() * v`.
    pub fn rotate_inv(&self, v: &Vec3) -> Vec3 {
        self.inverse().rotate(v)
    }

    /// Exponential map (Rodrigues): returns `R` with `R.matrix() = Exp(v)`.
    pub fn exp(v: &Vec3) -> Rotation {
        let theta = v.norm();
        let (s, c) = if theta < EXP_SMALL_ANGLE {
            // sin(t/2)/t and cos(t/2), truncation error < 1e-14 at the threshold
            (0.5 - theta * theta / 48.0, 1.0 - theta * theta / 8.0)
        } else {
            ((0.5 * theta).sin() / theta, (0.5 * theta).cos())
        };
        // C([k sin(t/2); cos(t/2)]) = Exp(-t k), so the vector part flips sign.
        Rotation::from_quat_xyzw(Vec4::new(-v.x * s, -v.y * s, -v.z * s, c))
    }

    /// Principal logarithm: `Rotation::exp(r.log()) == r`, with
    /// `||log|| <= pi`. At exactly pi the axis sign follows the
    /// largest-diagonal branch of the matrix construction.
    pub fn log(&self) -> Vec3 {
        // storage keeps w >= 0, so the half angle is in [0, pi/2]
        let w = self.q.w.clamp(0.0, 1.0);
        let qv = -self.quat_vec(); // undo storage sign (see `exp`)
        let sin_half = qv.norm();
        if sin_half < 1e-12 {
            return 2.0 * qv; // first-order term near the identity
        }
        let half_angle = sin_half.atan2(w);
        (2.0 * half_angle / sin_half) * qv
    }
}

/// JPL quaternion product `a ⊗ b`; satisfies `C(a ⊗ b) = C(a) C(b)`.
pub fn quat_multiply(a: &Rotation, b: &Rotation) -> Rotation {
    let (av, aw) = (a.quat_vec(), a.q.w);
    let (bv, bw) = (b.quat_vec(), b.q.w);
    let v = aw * bv + bw * av - av.cross(&bv);
    let w = aw * bw - av.dot(&bv);
    Rotation::from_quat_xyzw(Vec4::new(v.x, v.y, v.z, w))
}

/// Quaternion inverse (conjugate for unit quaternions).
pub fn quat_inverse(q: &Rotation) -> Rotation {
    let v = q.quat_vec();
    Rotation::from_quat_xyzw(Vec4::new(-v.x, -v.y, -v.z, q.q.w))
}

/// Multiplicative attitude error `theta = 2 vec(q ⊗ q_hat^{-1})`.
///
/// Equivalent matrix statement: `C(q) = Exp(-theta) C(q_hat)` to first
/// order. Returns the exact principal value (not just the small-angle
/// approximation), so it is also usable for evaluation metrics.
pub fn quat_error_vector(q: &Rotation, q_hat: &Rotation) -> Vec3 {
    let dq = quat_multiply(q, &quat_inverse(q_hat));
    // C(dq) = Exp(-phi) with phi = dq.log() ... exact: theta = -log(C(dq))
    -dq.log()
}

/// Left Jacobian of SO(3): `Exp(v + d) ≈ Exp(J_l(v) d) Exp(v)`.
pub fn left_jacobian(v: &Vec3) -> Mat3 {
    let theta = v.norm();
    let vx = skew(v);
    if theta < JACOBIAN_SMALL_ANGLE {
        return Mat3::identity() + 0.5 * vx + vx * vx / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() + (1.0 - theta.cos()) / t2 * vx + (theta - theta.sin()) / (t2 * theta) * vx * vx
}

/// Closed-form inverse of [`left_jacobian`].
pub fn left_jacobian_inv(v: &Vec3) -> Mat3 {
    let theta = v.norm();
    let vx = skew(v);
    if theta < JACOBIAN_SMALL_ANGLE {
        return Mat3::identity() - 0.5 * vx + vx * vx / 12.0;
    }
    let t2 = theta * theta;
    let coef = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() - 0.5 * vx + coef * vx * vx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_vec(rng: &mut StdRng, max_norm: f64) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                return v / v.norm() * rng.gen_range(0.01 * max_norm..max_norm);
            }
        }
    }

    #[test]
    fn skew_definition() {
        let m = skew(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(m[(0, 1)], -3.0);
        assert_eq!(m[(0, 2)], 2.0);
        assert_eq!(m[(1, 2)], -1.0);
        // cross product identity and antisymmetry
        let a = Vec3::new(0.3, -0.7, 1.1);
        let b = Vec3::new(-0.2, 0.5, 0.9);
        assert_abs_diff_eq!(skew(&a) * b, a.cross(&b), epsilon = 1e-15);
        assert_abs_diff_eq!(skew(&a) * b, -(skew(&b) * a), epsilon = 1e-15);
    }

    #[test]
    fn vee_roundtrip_and_rejection() {
        let v = Vec3::new(0.1, -0.2, 0.3);
        assert_abs_diff_eq!(vee(&skew(&v)).unwrap(), v, epsilon = 1e-15);
        let mut bad = skew(&v);
        bad[(0, 1)] += 1e-6;
        assert!(vee(&bad).is_err());
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        assert_abs_diff_eq!(
            Rotation::exp(&Vec3::zeros()).matrix(),
            Mat3::identity(),
            epsilon = 1e-15
        );
        // Exp(pi/2 x) maps y onto z (numeric Rodrigues oracle)
        let v = Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let theta = v.norm();
        let k = skew(&(v / theta));
        let rodrigues = Mat3::identity() + theta.sin() * k + (1.0 - theta.cos()) * k * k;
        assert_abs_diff_eq!(Rotation::exp(&v).matrix(), rodrigues, epsilon = 1e-14);
        assert_abs_diff_eq!(
            Rotation::exp(&v).rotate(&Vec3::y()),
            Vec3::z(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn log_identity_and_half_turn() {
        assert_abs_diff_eq!(Rotation::identity().log(), Vec3::zeros(), epsilon = 1e-15);
        // rotation by pi about x; trace/axis oracle: R = diag(1,-1,-1)
        let r = Rotation::from_matrix(&Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)));
        let l = r.log();
        assert_abs_diff_eq!(l.norm(), std::f64::consts::PI, epsilon = 1e-9);
        assert_abs_diff_eq!(l.x.abs(), std::f64::consts::PI, epsilon = 1e-9);
    }

    #[test]
    fn exp_log_roundtrip_bulk() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..10_000 {
            let v = random_vec(&mut rng, std::f64::consts::PI - 0.05);
            let r = Rotation::exp(&v);
            assert_abs_diff_eq!(r.log(), v, epsilon = 1e-10);
            // orthonormality + determinant
            let m = r.matrix();
            assert_abs_diff_eq!(m.transpose() * m, Mat3::identity(), epsilon = 1e-9);
            assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_exp_roundtrip_at_three_radians() {
        let v = Vec3::new(3.0, 0.0, 0.0);
        assert_abs_diff_eq!(Rotation::exp(&v).log(), v, epsilon = 1e-10);
        let v = Vec3::new(1.2, -2.1, 1.699).normalize() * 3.0;
        assert_abs_diff_eq!(Rotation::exp(&v).log(), v, epsilon = 1e-10);
    }

    #[test]
    fn from_matrix_all_branches() {
        let mut rng = StdRng::seed_from_u64(7);
        for angle in [0.01, 1.0, 2.5, 3.1, std::f64::consts::PI - 1e-7] {
            for _ in 0..100 {
                let axis = random_vec(&mut rng, 1.0).normalize();
                let r = Rotation::exp(&(axis * angle));
                let r2 = Rotation::from_matrix(&r.matrix());
                assert_abs_diff_eq!(r2.matrix(), r.matrix(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn quat_product_matches_matrix_product() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let a = Rotation::exp(&random_vec(&mut rng, 3.0));
            let b = Rotation::exp(&random_vec(&mut rng, 3.0));
            assert_abs_diff_eq!(
                a.compose(&b).matrix(),
                a.matrix() * b.matrix(),
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                a.inverse().matrix(),
                a.matrix().transpose(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn error_vector_sign_convention() {
        // theta = 2 vec(q ⊗ q_hat^{-1})  <=>  C(q) = Exp(-theta) C(q_hat)
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let q_hat = Rotation::exp(&random_vec(&mut rng, 2.0));
            let theta = random_vec(&mut rng, 1e-3);
            let q = Rotation::from_matrix(&(Rotation::exp(&(-theta)).matrix() * q_hat.matrix()));
            assert_abs_diff_eq!(quat_error_vector(&q, &q_hat), theta, epsilon = 1e-9);
            // small-angle quaternion form: dq = [theta/2; 1]
            let dq = quat_multiply(&q, &quat_inverse(&q_hat));
            assert_abs_diff_eq!(2.0 * dq.quat_vec(), theta, epsilon = 1e-9);
        }
        // identical quaternions -> zero
        let q = Rotation::exp(&Vec3::new(0.4, -0.2, 0.9));
        assert_abs_diff_eq!(quat_error_vector(&q, &q), Vec3::zeros(), epsilon = 1e-15);
        // exp-of-[1e-3,0,0] composed on q_hat (error side) -> ~[1e-3,0,0]
        let q_hat = Rotation::exp(&Vec3::new(0.3, 0.1, -0.5));
        let q = Rotation::from_matrix(
            &(Rotation::exp(&Vec3::new(-1e-3, 0.0, 0.0)).matrix() * q_hat.matrix()),
        );
        assert_abs_diff_eq!(
            quat_error_vector(&q, &q_hat),
            Vec3::new(1e-3, 0.0, 0.0),
            epsilon = 1e-9
        );
    }

    #[test]
    fn left_jacobian_zero_and_inverse() {
        assert_abs_diff_eq!(left_jacobian(&Vec3::zeros()), Mat3::identity(), epsilon = 1e-15);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let v = random_vec(&mut rng, 3.0);
            let prod = left_jacobian(&v) * left_jacobian_inv(&v);
            assert_abs_diff_eq!(prod, Mat3::identity(), epsilon = 1e-10);
        }
        // across the series threshold
        for n in [1e-7, 1e-6, 1e-5, 1e-4] {
            let v = Vec3::new(n, -n / 2.0, n / 3.0);
            let prod = left_jacobian(&v) * left_jacobian_inv(&v);
            assert_abs_diff_eq!(prod, Mat3::identity(), epsilon = 1e-12);
        }
    }

    #[test]
    fn left_jacobian_finite_difference() {
        // Exp(v + d) ~ Exp(J_l(v) d) Exp(v), finite differences at 1e-6
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let v = random_vec(&mut rng, 2.8);
            let jl = left_jacobian(&v);
            for i in 0..3 {
                let mut d = Vec3::zeros();
                d[i] = 1e-6;
                let lhs = Rotation::exp(&(v + d)).matrix();
                let rhs = Rotation::exp(&(jl * d)).matrix() * Rotation::exp(&v).matrix();
                let diff = (lhs - rhs).amax();
                assert!(diff < 1e-4 * 1e-6 / 1e-6, "rel err too large: {diff}");
                // tighter: compare the induced rotation-vector discrepancy
                let err = Rotation::from_matrix(&(lhs * rhs.transpose())).log().norm();
                assert!(err / 1e-6 < 1e-4, "rel err {}", err / 1e-6);
            }
        }
    }
}
