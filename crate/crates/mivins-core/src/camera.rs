//! Camera intrinsic models: perspective projection, radial-tangential and
//! equidistant-fisheye distortion, their Jacobians with respect to the point
//! and the intrinsic parameters, and rolling-shutter row timing.

use nalgebra::{Matrix2, Matrix2x3, Matrix2x4, Vector2};
use serde::{Deserialize, Serialize};

use crate::manifold::Vec3;

pub type Vec2 = Vector2<f64>;

/// Points closer than this to the image plane are rejected.
pub const Z_MIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionModel {
    /// 4-coefficient radial-tangential `(k1, k2, t1, t2)`.
    RadTan,
    /// 4-coefficient equidistant fisheye `(k1, k2, k3, k4)`.
    Equidistant,
}

/// Where the nominal frame timestamp sits within the rolling-shutter readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RsTimeReference {
    /// Nominal time marks the start of the first row (row 0 captures at it).
    #[default]
    StartOfImage,
    MiddleOfImage,
    EndOfImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub model: DistortionModel,
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub dist: [f64; 4],
    pub width: u32,
    pub height: u32,
    /// Rolling-shutter readout time across all rows (s); zero means global
    /// shutter.
    pub readout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PixelObservation {
    pub feature: crate::state::FeatureId,
    pub cam: crate::state::CamId,
    /// Nominal frame time on this camera's clock.
    pub stamp: f64,
    pub pixel: Vec2,
}

#[derive(Debug, thiserror::Error)]
pub enum CameraError {
    #[error("point behind camera (z = {0:.4} < {Z_MIN})")]
    BehindCamera(f64),
}

impl Intrinsics {
    /// Raw-pixel projection: perspective division, distortion, then the
    /// affine intrinsic map.
    pub fn project(&self, p_c: &Vec3) -> Result<Vec2, CameraError> {
        if p_c.z < Z_MIN {
            return Err(CameraError::BehindCamera(p_c.z));
        }
        let zn = Vec2::new(p_c.x / p_c.z, p_c.y / p_c.z);
        let zd = self.distort(&zn);
        Ok(Vec2::new(
            self.fx * zd.x + self.px,
            self.fy * zd.y + self.py,
        ))
    }

    /// Distort normalized image coordinates.
    pub fn distort(&self, zn: &Vec2) -> Vec2 {
        let (x, y) = (zn.x, zn.y);
        match self.model {
            DistortionModel::RadTan => {
                let [k1, k2, t1, t2] = self.dist;
                let r2 = x * x + y * y;
                let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
                Vec2::new(
                    x * radial + 2.0 * t1 * x * y + t2 * (r2 + 2.0 * x * x),
                    y * radial + t1 * (r2 + 2.0 * y * y) + 2.0 * t2 * x * y,
                )
            }
            DistortionModel::Equidistant => {
                let [k1, k2, k3, k4] = self.dist;
                let r = (x * x + y * y).sqrt();
                if r < 1e-12 {
                    return *zn;
                }
                let theta = r.atan();
                let t2 = theta * theta;
                let theta_d = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))));
                let scale = theta_d / r;
                Vec2::new(x * scale, y * scale)
            }
        }
    }

    /// Iterative undistortion (fixed point on the distortion residual).
    pub fn undistort(&self, zd: &Vec2) -> Vec2 {
        let mut zn = *zd;
        for _ in 0..20 {
            let err = self.distort(&zn) - zd;
            let j = self.distort_jacobian(&zn);
            if let Some(jinv) = j.try_inverse() {
                zn -= jinv * err;
            } else {
                zn -= err;
            }
            if err.norm() < 1e-12 {
                break;
            }
        }
        zn
    }

    /// Normalized coordinates of a raw pixel (affine inverse + undistort).
    pub fn pixel_to_normalized(&self, z: &Vec2) -> Vec2 {
        let zd = Vec2::new((z.x - self.px) / self.fx, (z.y - self.py) / self.fy);
        self.undistort(&zd)
    }

    /// `d(distorted) / d(normalized)`, 2x2.
    pub fn distort_jacobian(&self, zn: &Vec2) -> Matrix2<f64> {
        // central differences are exact enough here and keep the two models
        // branch-free; analytic versions exist but buy nothing measurable
        let h = 1e-7;
        let dx = (self.distort(&(zn + Vec2::new(h, 0.0))) - self.distort(&(zn - Vec2::new(h, 0.0))))
            / (2.0 * h);
        let dy = (self.distort(&(zn + Vec2::new(0.0, h))) - self.distort(&(zn - Vec2::new(0.0, h))))
            / (2.0 * h);
        Matrix2::from_columns(&[dx, dy])
    }

    /// Jacobians of the raw-pixel measurement w.r.t. the camera-frame point
    /// (2x3) and the intrinsic parameters `(fx fy px py | d1..d4)` (2x8).
    pub fn project_jacobians(
        &self,
        p_c: &Vec3,
    ) -> Result<(Matrix2x3<f64>, Matrix2x4<f64>, Matrix2x4<f64>), CameraError> {
        if p_c.z < Z_MIN {
            return Err(CameraError::BehindCamera(p_c.z));
        }
        let zn = Vec2::new(p_c.x / p_c.z, p_c.y / p_c.z);
        let zd = self.distort(&zn);
        let f = nalgebra::Matrix2::new(self.fx, 0.0, 0.0, self.fy);

        // d zn / d p_c
        let iz = 1.0 / p_c.z;
        let dzn_dp = Matrix2x3::new(iz, 0.0, -p_c.x * iz * iz, 0.0, iz, -p_c.y * iz * iz);
        let dz_dp = f * self.distort_jacobian(&zn) * dzn_dp;

        // d z / d (fx fy px py)
        let dz_dproj = Matrix2x4::new(zd.x, 0.0, 1.0, 0.0, 0.0, zd.y, 0.0, 1.0);

        // d z / d dist: central differences over the 4 coefficients
        let mut dz_ddist = Matrix2x4::zeros();
        let h = 1e-7;
        for i in 0..4 {
            let mut hi = *self;
            hi.dist[i] += h;
            let mut lo = *self;
            lo.dist[i] -= h;
            let d = (hi.distort(&zn) - lo.distort(&zn)) / (2.0 * h);
            dz_ddist.set_column(i, &(f * d));
        }
        Ok((dz_dp, dz_dproj, dz_ddist))
    }
}

/// Capture time of row `m` (of `rows` total) for a frame whose nominal time
/// maps to `nominal_in_base_clock` after the offset chain. Returns the time
/// and the readout-Jacobian scale factor (the fraction of the readout that
/// has elapsed at this row).
pub fn rs_row_time(
    nominal_in_base_clock: f64,
    row: f64,
    rows: u32,
    readout: f64,
    reference: RsTimeReference,
) -> (f64, f64) {
    let m = row.clamp(0.0, rows.saturating_sub(1) as f64);
    let frac = match reference {
        RsTimeReference::StartOfImage => m / rows as f64,
        RsTimeReference::MiddleOfImage => m / rows as f64 - 0.5,
        RsTimeReference::EndOfImage => m / rows as f64 - 1.0,
    };
    (nominal_in_base_clock + frac * readout, frac)
}
