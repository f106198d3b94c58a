//! Visual feature updates: the raw-pixel measurement chain through
//! distortion, rolling-shutter row timing, camera extrinsics/time offsets,
//! and on-manifold pose interpolation over the clone window; MSCKF nullspace
//! updates for finished tracks and SLAM feature updates with delayed
//! initialization.
//!
//! Jacobians linearize at first estimates for clones and features and at
//! current estimates for calibration. Residuals evaluate at current
//! estimates; the interpolated pose for the residual can optionally be
//! recomputed by re-integrating buffered base-IMU readings from the nearest
//! clone, which is more accurate than the fitted polynomial during fast
//! motion.

use nalgebra::{DMatrix, DVector, Matrix2x3, SMatrix};
use serde::{Deserialize, Serialize};

use super::triangulation::{triangulate_views, View};
use super::{chi2_threshold, UpdateConfig};
use crate::camera::{rs_row_time, Vec2};
use crate::interpolation::{select_knots, PosePolynomial};
use crate::manifold::skew;
use crate::propagation::{extract_window, gravity_vector, integrate_imu, ImuSample, NoiseSpec};
use crate::state::{CamId, CloneId, EntryKey, FeatureId, FullState, ImuMean};
use crate::Pose;

/// How the interpolated-pose residual is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Re-integrate saved base-IMU readings from the nearest earlier clone.
    Reintegrate,
    /// Evaluate the interpolation polynomial at current clone estimates.
    Polynomial,
}

/// Observations of one feature from one camera, time-ordered.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub feature: FeatureId,
    pub cam: CamId,
    /// (nominal frame time in the camera's clock, raw pixel)
    pub obs: Vec<(f64, Vec2)>,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct VisualOutcome {
    pub tracks_used: usize,
    pub tracks_gated: usize,
    /// Triangulation failures, unresolvable windows, short stacks.
    pub tracks_failed: usize,
    pub rows_applied: usize,
}

pub struct VisualContext<'a> {
    pub cfg: &'a UpdateConfig,
    /// Seconds since the first update (drives the warm-up noise schedule).
    pub t_run: f64,
    /// Base-IMU samples (base-IMU clock) for re-integration residuals.
    pub imu_buffer: Option<&'a [ImuSample]>,
}

/// Resolved timing/window geometry of one observation.
struct ObsGeometry {
    cam: CamId,
    is_base: bool,
    /// Interpolation query time in the base-camera clock (offset chain plus
    /// the rolling-shutter row time of the measured pixel row).
    t_img: f64,
    /// Fraction of the readout elapsed at the measured row.
    frac: f64,
    /// `order + 1` bounding clones, oldest first.
    knots: Vec<(CloneId, f64)>,
    order: usize,
}

fn resolve_geometry(
    state: &FullState,
    cam: CamId,
    stamp: f64,
    row: f64,
    cfg: &UpdateConfig,
) -> Option<ObsGeometry> {
    let calib = state.calib.cam.get(&cam)?;
    let is_base = cam == state.base_cam;
    let t_cb = stamp + if is_base { 0.0 } else { calib.time_offset };
    let (t_img, frac) = rs_row_time(
        t_cb,
        row,
        calib.intr.height,
        calib.intr.readout,
        cfg.rs_reference,
    );
    let clones = state.clones_by_time();
    if clones.len() < 2 {
        return None;
    }
    let order = cfg.interp_order.clamp(1, clones.len() - 1);
    let times: Vec<f64> = clones.iter().map(|(_, c)| c.stamp).collect();
    let start = select_knots(&times, t_img, order)?;
    let knots = clones[start..start + order + 1]
        .iter()
        .map(|(id, c)| (*id, c.stamp))
        .collect();
    Some(ObsGeometry {
        cam,
        is_base,
        t_img,
        frac,
        knots,
        order,
    })
}

fn poly_from_knots(state: &FullState, geo: &ObsGeometry, fej: bool) -> Option<PosePolynomial> {
    let fej = fej && std::env::var("DBG_NO_FEJ_VIS").is_err();
    let knots: Vec<(f64, Pose)> = geo
        .knots
        .iter()
        .map(|(id, stamp)| {
            let pose = if fej {
                state.fej_clone_pose(*id)?
            } else {
                Some(state.clones.get(id)?.pose)?
            };
            Some((*stamp, pose))
        })
        .collect::<Option<Vec<_>>>()?;
    PosePolynomial::fit(&knots, geo.order).ok()
}

/// Base-IMU pose at the query time by mean-only re-integration from the
/// nearest earlier clone (clock offsets cancel in the time difference).
fn reintegrate_pose(
    state: &FullState,
    geo: &ObsGeometry,
    buf: &[ImuSample],
    gravity_mag: f64,
) -> Option<Pose> {
    let (cid, stamp) = *geo
        .knots
        .iter()
        .rev()
        .find(|(_, s)| *s <= geo.t_img + 1e-12)?;
    let clone = state.clones.get(&cid)?;
    let dt = geo.t_img - stamp;
    if dt <= 1e-9 {
        return Some(clone.pose);
    }
    let base = state.imus[&state.base_imu];
    let t0 = clone.imu_stamp;
    let t1 = clone.imu_stamp + dt;
    let window = extract_window(buf, t0, t1, 0.01).ok()?;
    let x0 = ImuMean {
        rot: clone.pose.rot,
        bg: base.bg,
        vel: clone.vel,
        ba: base.ba,
        pos: clone.pose.pos,
        stamp: t0,
    };
    let g = gravity_vector(gravity_mag);
    let (out, _, _, _) = integrate_imu(&x0, &window, t1, &g, &NoiseSpec::default(), None).ok()?;
    Some(out.pose())
}

fn residual_pose(state: &FullState, geo: &ObsGeometry, ctx: &VisualContext) -> Option<Pose> {
    if ctx.cfg.residual_mode == ResidualMode::Reintegrate {
        if let Some(buf) = ctx.imu_buffer {
            if let Some(pose) = reintegrate_pose(state, geo, buf, ctx.cfg.gravity) {
                return Some(pose);
            }
        }
    }
    Some(poly_from_knots(state, geo, false)?.eval(geo.t_img))
}

/// Raw-pixel prediction for a world point along the full chain (used for
/// residuals and as the finite-difference target in tests).
fn predict_pixel(
    state: &FullState,
    geo: &ObsGeometry,
    p_f: &crate::manifold::Vec3,
    ctx: &VisualContext,
) -> Option<Vec2> {
    let pose = residual_pose(state, geo, ctx)?;
    let calib = state.calib.cam.get(&geo.cam)?;
    let p_c = calib.rot.rotate(&pose.rot.rotate(&(p_f - pose.pos))) + calib.pos;
    calib.intr.project(&p_c).ok()
}

struct ObsRows {
    residual: Vec2,
    blocks: Vec<(EntryKey, DMatrix<f64>)>,
    h_f: Matrix2x3<f64>,
}

/// Residual and Jacobian blocks of one observation. `p_f_lin` is the
/// feature linearization value (FEJ), `p_f_cur` the current estimate used
/// for the residual.
fn observation_rows(
    state: &FullState,
    geo: &ObsGeometry,
    p_f_lin: &crate::manifold::Vec3,
    p_f_cur: &crate::manifold::Vec3,
    pixel: &Vec2,
    ctx: &VisualContext,
) -> Option<ObsRows> {
    let calib = state.calib.cam.get(&geo.cam)?;
    let pred = predict_pixel(state, geo, p_f_cur, ctx)?;
    let residual = pixel - pred;

    let poly_lin = poly_from_knots(state, geo, true)?;
    let pose_lin = poly_lin.eval(geo.t_img);
    let y = pose_lin.rot.rotate(&(p_f_lin - pose_lin.pos));
    let p_c = calib.rot.rotate(&y) + calib.pos;
    let (dz_dp, dz_dproj, dz_ddist) = calib.intr.project_jacobians(&p_c).ok()?;

    let r_ce = calib.rot.matrix();
    let r_t = pose_lin.rot.matrix();
    let d_theta = r_ce * skew(&y);
    let d_pos = -(r_ce * r_t);
    let d_pf = r_ce * r_t;
    let d_theta_ce = skew(&(p_c - calib.pos));

    // 2x6 derivative of the pixel w.r.t. the interpolated pose error
    let mut dz_dpose = SMatrix::<f64, 2, 6>::zeros();
    dz_dpose
        .view_mut((0, 0), (2, 3))
        .copy_from(&(dz_dp * d_theta));
    dz_dpose
        .view_mut((0, 3), (2, 3))
        .copy_from(&(dz_dp * d_pos));

    let interp = poly_lin.jacobians(geo.t_img);
    let mut blocks: Vec<(EntryKey, DMatrix<f64>)> = Vec::new();
    for (k, (cid, _)) in geo.knots.iter().enumerate() {
        let m = dz_dpose * interp.source[k]; // 2x6
        let mut bt = DMatrix::zeros(2, 3);
        bt.copy_from(&m.view((0, 0), (2, 3)));
        let mut bp = DMatrix::zeros(2, 3);
        bp.copy_from(&m.view((0, 3), (2, 3)));
        blocks.push((EntryKey::CloneTheta(*cid), bt));
        blocks.push((EntryKey::ClonePos(*cid), bp));
    }
    let time_col = dz_dpose * interp.time; // 2x1
    if !geo.is_base {
        blocks.push((
            EntryKey::CalCamTime(geo.cam),
            DMatrix::from_iterator(2, 1, time_col.iter().copied()),
        ));
    }
    blocks.push((
        EntryKey::CalCamReadout(geo.cam),
        DMatrix::from_iterator(2, 1, (geo.frac * time_col).iter().copied()),
    ));
    let ext_t = dz_dp * d_theta_ce;
    blocks.push((
        EntryKey::CalCamTheta(geo.cam),
        DMatrix::from_iterator(2, 3, ext_t.iter().copied()),
    ));
    blocks.push((
        EntryKey::CalCamPos(geo.cam),
        DMatrix::from_iterator(2, 3, dz_dp.iter().copied()),
    ));
    blocks.push((
        EntryKey::CalCamProj(geo.cam),
        DMatrix::from_iterator(2, 4, dz_dproj.iter().copied()),
    ));
    blocks.push((
        EntryKey::CalCamDist(geo.cam),
        DMatrix::from_iterator(2, 4, dz_ddist.iter().copied()),
    ));

    Some(ObsRows {
        residual,
        blocks,
        h_f: dz_dp * d_pf,
    })
}

/// Camera view (for triangulation) at the current clone estimates.
fn view_for(state: &FullState, geo: &ObsGeometry, pixel: &Vec2) -> Option<View> {
    let calib = state.calib.cam.get(&geo.cam)?;
    let pose = poly_from_knots(state, geo, false)?.eval(geo.t_img);
    let rot = calib.rot.compose(&pose.rot);
    let center = pose.pos - rot.rotate_inv(&calib.pos);
    Some(View {
        rot,
        center,
        zn: calib.intr.pixel_to_normalized(pixel),
    })
}

enum TrackOutcome {
    /// Whitened projected rows ready for stacking.
    Rows(DMatrix<f64>, DVector<f64>),
    Gated,
    Failed,
}

/// Triangulate, stack, nullspace-project, and gate one finished track.
fn process_msckf_track(
    state: &FullState,
    track: &FeatureTrack,
    ctx: &VisualContext,
) -> TrackOutcome {
    let mut geos: Vec<(ObsGeometry, Vec2)> = Vec::new();
    let mut views = Vec::new();
    for (stamp, px) in &track.obs {
        let Some(geo) = resolve_geometry(state, track.cam, *stamp, px.y, ctx.cfg) else {
            continue;
        };
        let Some(view) = view_for(state, &geo, px) else {
            continue;
        };
        views.push(view);
        geos.push((geo, *px));
    }
    if views.len() < 2 {
        return TrackOutcome::Failed;
    }
    let Ok(p_f) = triangulate_views(&views, ctx.cfg.parallax_min_deg) else {
        return TrackOutcome::Failed;
    };

    let dim = state.dim();
    let mut rows: Vec<(DMatrix<f64>, DMatrix<f64>, Vec2)> = Vec::new();
    for (geo, px) in &geos {
        if let Some(or) = observation_rows(state, geo, &p_f, &p_f, px, ctx) {
            let h_x = state
                .assemble_blocks(&or.blocks, 2)
                .expect("all entries live");
            let mut h_f = DMatrix::zeros(2, 3);
            h_f.copy_from(&or.h_f);
            rows.push((h_x, h_f, or.residual));
        }
    }
    if rows.len() < 2 {
        return TrackOutcome::Failed;
    }
    let n = rows.len() * 2;
    let mut h_x = DMatrix::zeros(n, dim);
    let mut h_f = DMatrix::zeros(n, 3);
    let mut r = DVector::zeros(n);
    for (i, (hx, hf, res)) in rows.iter().enumerate() {
        h_x.view_mut((2 * i, 0), (2, dim)).copy_from(hx);
        h_f.view_mut((2 * i, 0), (2, 3)).copy_from(hf);
        r[2 * i] = res.x;
        r[2 * i + 1] = res.y;
    }

    let Some((h_proj, r_proj)) = nullspace_project(&h_f, &h_x, &r) else {
        return TrackOutcome::Failed;
    };

    // whiten and gate
    let sigma = ctx.cfg.pixel_sigma_for(
        track.cam == state.base_cam,
        ctx.t_run,
    );
    let h_w = h_proj / sigma;
    let r_w = r_proj / sigma;
    let dof = r_w.len();
    let s = &h_w * state.cov() * h_w.transpose() + DMatrix::identity(dof, dof);
    let gamma = match s.cholesky() {
        Some(chol) => (r_w.transpose() * chol.solve(&r_w))[(0, 0)],
        None => f64::INFINITY,
    };
    if gamma > chi2_threshold(dof, ctx.cfg.chi2_level) {
        return TrackOutcome::Gated;
    }
    TrackOutcome::Rows(h_w, r_w)
}

/// Left-nullspace projection of the feature Jacobian: applies the Q^T of
/// `H_f`'s QR decomposition and drops the first 3 rows. Returns `None` when
/// `H_f` is rank-deficient.
fn nullspace_project(
    h_f: &DMatrix<f64>,
    h_x: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let n = h_f.nrows();
    if n <= 3 {
        return None;
    }
    let qr = h_f.clone().qr();
    let rr = qr.r();
    let scale = rr[(0, 0)].abs().max(1e-12);
    if rr[(1, 1)].abs() < 1e-6 * scale || rr[(2, 2)].abs() < 1e-6 * scale {
        return None;
    }
    let mut t = DMatrix::zeros(n, h_x.ncols() + 1);
    t.view_mut((0, 0), (n, h_x.ncols())).copy_from(h_x);
    t.view_mut((0, h_x.ncols()), (n, 1)).copy_from(r);
    qr.q_tr_mul(&mut t);
    let h_proj = t.view((3, 0), (n - 3, h_x.ncols())).into_owned();
    let r_proj = t.view((3, h_x.ncols()), (n - 3, 1)).column(0).into_owned();
    Some((h_proj, r_proj))
}

/// MSCKF update over a batch of finished tracks: per-track nullspace
/// projection and gating, thin-QR compression of the stacked system, one
/// EKF update.
pub fn msckf_update(
    state: &mut FullState,
    tracks: &[FeatureTrack],
    ctx: &VisualContext,
) -> VisualOutcome {
    let mut out = VisualOutcome::default();
    let mut stacked: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
    for track in tracks {
        match process_msckf_track(state, track, ctx) {
            TrackOutcome::Rows(h, r) => {
                out.tracks_used += 1;
                stacked.push((h, r));
            }
            TrackOutcome::Gated => out.tracks_gated += 1,
            TrackOutcome::Failed => out.tracks_failed += 1,
        }
    }
    if stacked.is_empty() {
        return out;
    }
    let dim = state.dim();
    let total: usize = stacked.iter().map(|(_, r)| r.len()).sum();
    let mut h = DMatrix::zeros(total, dim);
    let mut r = DVector::zeros(total);
    let mut at = 0;
    for (hs, rs) in &stacked {
        h.view_mut((at, 0), (rs.len(), dim)).copy_from(hs);
        r.view_mut((at, 0), (rs.len(), 1)).copy_from(rs);
        at += rs.len();
    }
    // thin-QR measurement compression
    let (h, r) = if total > dim {
        let qr = h.clone().qr();
        let mut rr = DMatrix::zeros(total, 1);
        rr.column_mut(0).copy_from(&r);
        qr.q_tr_mul(&mut rr);
        (qr.r(), rr.view((0, 0), (dim, 1)).column(0).into_owned())
    } else {
        (h, r)
    };
    out.rows_applied = r.len();
    let ones = DVector::from_element(r.len(), 1.0);
    state.ekf_update(&h, &r, &ones);
    out
}

/// EKF update with current observations of SLAM features already in the
/// state. Observations are grouped per feature; gating is per feature.
pub fn slam_update(
    state: &mut FullState,
    groups: &[(FeatureId, Vec<(CamId, f64, Vec2)>)],
    ctx: &VisualContext,
) -> VisualOutcome {
    let mut out = VisualOutcome::default();
    let dim = state.dim();
    let mut stacked: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
    for (fid, obs) in groups {
        let Some(feat) = state.features.get(fid) else {
            continue;
        };
        let p_cur = feat.pos;
        let p_lin = state
            .fej_value(EntryKey::Feature(*fid))
            .map(|v| v.as_vec3())
            .unwrap_or(p_cur);
        let mut rows: Vec<(DMatrix<f64>, Vec2, f64)> = Vec::new();
        for (cam, stamp, px) in obs {
            let Some(geo) = resolve_geometry(state, *cam, *stamp, px.y, ctx.cfg) else {
                continue;
            };
            let Some(mut or) = observation_rows(state, &geo, &p_lin, &p_cur, px, ctx) else {
                continue;
            };
            or.blocks.push((
                EntryKey::Feature(*fid),
                DMatrix::from_iterator(2, 3, or.h_f.iter().copied()),
            ));
            let h = state.assemble_blocks(&or.blocks, 2).expect("entries live");
            let sigma = ctx.cfg.pixel_sigma_for(*cam == state.base_cam, ctx.t_run);
            rows.push((h, or.residual, sigma));
        }
        if rows.is_empty() {
            out.tracks_failed += 1;
            continue;
        }
        let n = 2 * rows.len();
        let mut h = DMatrix::zeros(n, dim);
        let mut r = DVector::zeros(n);
        for (i, (hs, res, sigma)) in rows.iter().enumerate() {
            h.view_mut((2 * i, 0), (2, dim)).copy_from(&(hs / *sigma));
            r[2 * i] = res.x / sigma;
            r[2 * i + 1] = res.y / sigma;
        }
        let s = &h * state.cov() * h.transpose() + DMatrix::identity(n, n);
        let gamma = match s.cholesky() {
            Some(chol) => (r.transpose() * chol.solve(&r))[(0, 0)],
            None => f64::INFINITY,
        };
        if gamma > chi2_threshold(n, ctx.cfg.chi2_level) {
            out.tracks_gated += 1;
            continue;
        }
        out.tracks_used += 1;
        stacked.push((h, r));
    }
    if stacked.is_empty() {
        return out;
    }
    let total: usize = stacked.iter().map(|(_, r)| r.len()).sum();
    let mut h = DMatrix::zeros(total, dim);
    let mut r = DVector::zeros(total);
    let mut at = 0;
    for (hs, rs) in &stacked {
        h.view_mut((at, 0), (rs.len(), dim)).copy_from(hs);
        r.view_mut((at, 0), (rs.len(), 1)).copy_from(rs);
        at += rs.len();
    }
    out.rows_applied = r.len();
    let ones = DVector::from_element(r.len(), 1.0);
    state.ekf_update(&h, &r, &ones);
    out
}

#[derive(Debug, thiserror::Error)]
pub enum SlamInitError {
    #[error("triangulation failed or window unresolvable")]
    Triangulation,
    #[error("initialization residual failed the chi-square gate")]
    Gated,
    #[error("feature Jacobian rank-deficient")]
    RankDeficient,
}

/// Delayed initialization of a SLAM feature from a mature track: the
/// feature-row part of the stacked system seeds the new state entry with a
/// consistent covariance, the nullspace part is applied as a regular MSCKF
/// update (its columns on the new feature are zero by construction).
pub fn slam_init(
    state: &mut FullState,
    track: &FeatureTrack,
    ctx: &VisualContext,
) -> Result<FeatureId, SlamInitError> {
    let mut geos: Vec<(ObsGeometry, Vec2)> = Vec::new();
    let mut views = Vec::new();
    for (stamp, px) in &track.obs {
        let Some(geo) = resolve_geometry(state, track.cam, *stamp, px.y, ctx.cfg) else {
            continue;
        };
        let Some(view) = view_for(state, &geo, px) else {
            continue;
        };
        views.push(view);
        geos.push((geo, *px));
    }
    if views.len() < 3 {
        return Err(SlamInitError::Triangulation);
    }
    let p_f = triangulate_views(&views, ctx.cfg.parallax_min_deg)
        .map_err(|_| SlamInitError::Triangulation)?;

    let dim = state.dim();
    let sigma = ctx.cfg.pixel_sigma_for(track.cam == state.base_cam, ctx.t_run);
    let mut rows: Vec<(DMatrix<f64>, Matrix2x3<f64>, Vec2)> = Vec::new();
    for (geo, px) in &geos {
        if let Some(or) = observation_rows(state, geo, &p_f, &p_f, px, ctx) {
            let h = state.assemble_blocks(&or.blocks, 2).expect("entries live");
            rows.push((h, or.h_f, or.residual));
        }
    }
    if rows.len() < 3 {
        return Err(SlamInitError::Triangulation);
    }
    let n = 2 * rows.len();
    let mut h_x = DMatrix::zeros(n, dim);
    let mut h_f = DMatrix::zeros(n, 3);
    let mut r = DVector::zeros(n);
    for (i, (hs, hf, res)) in rows.iter().enumerate() {
        h_x.view_mut((2 * i, 0), (2, dim)).copy_from(&(hs / sigma));
        h_f.view_mut((2 * i, 0), (2, 3)).copy_from(&(hf / sigma));
        r[2 * i] = res.x / sigma;
        r[2 * i + 1] = res.y / sigma;
    }

    let qr = h_f.clone().qr();
    let r1 = qr.r(); // 3x3 upper (n >= 3)
    let scale = r1[(0, 0)].abs().max(1e-12);
    if r1[(1, 1)].abs() < 1e-6 * scale || r1[(2, 2)].abs() < 1e-6 * scale {
        return Err(SlamInitError::RankDeficient);
    }
    let mut t = DMatrix::zeros(n, dim + 1);
    t.view_mut((0, 0), (n, dim)).copy_from(&h_x);
    t.view_mut((0, dim), (n, 1)).copy_from(&r);
    qr.q_tr_mul(&mut t);
    let h1 = t.view((0, 0), (3, dim)).into_owned();
    let r1_vec = t.view((0, dim), (3, 1)).column(0).into_owned();
    let h2 = t.view((3, 0), (n - 3, dim)).into_owned();
    let r2 = t.view((3, dim), (n - 3, 1)).column(0).into_owned();

    // gate the nullspace part before touching the state
    let s = &h2 * state.cov() * h2.transpose() + DMatrix::identity(n - 3, n - 3);
    let gamma = match s.cholesky() {
        Some(chol) => (r2.transpose() * chol.solve(&r2))[(0, 0)],
        None => f64::INFINITY,
    };
    if gamma > chi2_threshold(n - 3, ctx.cfg.chi2_level) {
        return Err(SlamInitError::Gated);
    }

    // delayed init: f~ = R1^{-1} (r1 - H1 x~ - n1)
    let r1_sq = r1.view((0, 0), (3, 3)).into_owned();
    let r1_inv = r1_sq
        .try_inverse()
        .ok_or(SlamInitError::RankDeficient)?;
    let mean_shift = &r1_inv * &r1_vec;
    let p_init = p_f + crate::manifold::Vec3::new(mean_shift[0], mean_shift[1], mean_shift[2]);
    let h1p = &h1 * state.cov(); // 3 x dim
    let cross = -(&r1_inv * &h1p);
    let block = &r1_inv * (&h1p * h1.transpose() + DMatrix::identity(3, 3)) * r1_inv.transpose();
    state.append_feature(track.feature, p_init, &cross, &block);

    // nullspace part as a standard update on the augmented state (zero
    // columns on the new feature)
    let mut h2_aug = DMatrix::zeros(n - 3, dim + 3);
    h2_aug.view_mut((0, 0), (n - 3, dim)).copy_from(&h2);
    let ones = DVector::from_element(n - 3, 1.0);
    state.ekf_update(&h2_aug, &r2, &ones);
    Ok(track.feature)
}
