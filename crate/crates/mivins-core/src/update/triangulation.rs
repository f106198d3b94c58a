//! Multi-view point triangulation with fixed camera poses: linear
//! least-squares seed refined by Gauss-Newton on the normalized reprojection
//! error.

use nalgebra::{Matrix2x3, Matrix3, Vector2};

use crate::camera::Z_MIN;
use crate::manifold::{Rotation, Vec3};

/// One observation: camera orientation (global into camera), camera center
/// in the global frame, and the undistorted normalized image coordinates.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub rot: Rotation,
    pub center: Vec3,
    pub zn: Vector2<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TriangulationError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("insufficient parallax ({0:.4} deg)")]
    InsufficientParallax(f64),
    #[error("triangulated point behind a camera (z = {0:.4})")]
    BehindCamera(f64),
    #[error("degenerate geometry (normal matrix singular)")]
    Singular,
    #[error("Gauss-Newton refinement diverged")]
    Diverged,
}

pub fn triangulate_views(
    views: &[View],
    parallax_min_deg: f64,
) -> Result<Vec3, TriangulationError> {
    if views.len() < 2 {
        return Err(TriangulationError::TooFewViews(views.len()));
    }
    let bearings: Vec<Vec3> = views
        .iter()
        .map(|v| v.rot.rotate_inv(&Vec3::new(v.zn.x, v.zn.y, 1.0).normalize()))
        .collect();

    // max subtended angle across the track
    let mut max_angle: f64 = 0.0;
    for i in 0..bearings.len() {
        for j in i + 1..bearings.len() {
            let c = bearings[i].dot(&bearings[j]).clamp(-1.0, 1.0);
            max_angle = max_angle.max(c.acos());
        }
    }
    if max_angle.to_degrees() < parallax_min_deg {
        return Err(TriangulationError::InsufficientParallax(
            max_angle.to_degrees(),
        ));
    }

    // linear seed: sum (I - d d^T) (p - c) = 0
    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vec3::zeros();
    for (d, v) in bearings.iter().zip(views) {
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * v.center;
    }
    let mut p = a
        .lu()
        .solve(&b)
        .ok_or(TriangulationError::Singular)?;

    // Gauss-Newton on normalized reprojection
    let cost = |p: &Vec3| -> Option<f64> {
        let mut c = 0.0;
        for v in views {
            let pc = v.rot.rotate(&(p - v.center));
            if pc.z < Z_MIN {
                return None;
            }
            let r = Vector2::new(pc.x / pc.z - v.zn.x, pc.y / pc.z - v.zn.y);
            c += r.norm_squared();
        }
        Some(c)
    };
    let mut last_cost = cost(&p).ok_or(TriangulationError::BehindCamera(0.0))?;
    for _ in 0..10 {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vec3::zeros();
        for v in views {
            let pc = v.rot.rotate(&(p - v.center));
            if pc.z < Z_MIN {
                return Err(TriangulationError::BehindCamera(pc.z));
            }
            let iz = 1.0 / pc.z;
            let dzn = Matrix2x3::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz);
            let j = dzn * v.rot.matrix();
            let r = Vector2::new(pc.x * iz - v.zn.x, pc.y * iz - v.zn.y);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let step = jtj
            .lu()
            .solve(&jtr)
            .ok_or(TriangulationError::Singular)?;
        p -= step;
        let c = cost(&p).ok_or(TriangulationError::BehindCamera(0.0))?;
        if c > 4.0 * last_cost + 1e-9 {
            return Err(TriangulationError::Diverged);
        }
        last_cost = c;
        if step.norm() < 1e-10 {
            break;
        }
    }
    // final cheirality check in every view
    for v in views {
        let pc = v.rot.rotate(&(p - v.center));
        if pc.z < Z_MIN {
            return Err(TriangulationError::BehindCamera(pc.z));
        }
    }
    Ok(p)
}
