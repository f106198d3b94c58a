//! Run orchestration: scenario synthesis, filter initialization, event
//! replay with divergence monitoring, metric evaluation, and seeded
//! Monte-Carlo batches.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::{InitMode, RunConfig};
use crate::estimator::{Estimator, EstimatorConfig, RunStats, Snapshot};
use crate::evaluation::{self, AlignMode, EvalReport};
use crate::manifold::{quat_error_vector, Vec3};
use crate::simulator::{perturb_calibration, simulate, Event, SimConfig, SimOutput};
use crate::state::{
    CalibrationBlock, CamId, EntryKey, FullState, ImuId, ImuMean,
};
use crate::Pose;

pub const RPE_LENGTHS: [f64; 6] = [8.0, 16.0, 24.0, 32.0, 40.0, 48.0];
/// Abort threshold on the published-pose NEES.
const DIVERGENCE_NEES: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error("estimator diverged at t={0:.2}s (NEES {1:.3e})")]
    Diverged(f64, f64),
    #[error("initialization failed: {0}")]
    Init(String),
}

/// Final-snapshot calibration errors against the truth.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct CalibErrorSummary {
    pub imu_rot_deg: Vec<f64>,
    pub imu_pos_m: Vec<f64>,
    pub imu_toff_s: Vec<f64>,
    pub cam_rot_deg: Vec<f64>,
    pub cam_pos_m: Vec<f64>,
    pub cam_toff_s: Vec<f64>,
    pub cam_readout_s: Vec<f64>,
}

pub struct RunArtifacts {
    pub seed: u64,
    pub report: EvalReport,
    pub snapshots: Vec<Snapshot>,
    pub stats: RunStats,
    pub truth_poses: Vec<(f64, Pose)>,
    pub truth_calib: CalibrationBlock,
    pub calib_errors: CalibErrorSummary,
    pub aborted: bool,
}

/// Build the initial filter state per the configured init mode.
fn initial_state(
    config: &RunConfig,
    sim: &SimOutput,
    sim_cfg: &SimConfig,
    seed: u64,
) -> Result<FullState, RunError> {
    let (calib_est, mut prior_sig) = perturb_calibration(
        &sim.truth_calib,
        &sim_cfg.priors,
        sim_cfg.readout_init_zero,
        seed,
    );
    let mut calib_est = calib_est;
    if !config.estimator.calibrate_readout {
        // pin the readout at its initial value: zero prior variance
        for cam in calib_est.cam.keys() {
            prior_sig.insert(EntryKey::CalCamReadout(*cam), DVector::from_element(1, 0.0));
        }
    }
    if config.scenario.noiseless {
        // truth calibration and zero priors: pure integration test profile
        calib_est = sim.truth_calib.clone();
        for v in prior_sig.values_mut() {
            v.fill(1e-8);
        }
    }

    let base = ImuId(0);
    let mut imus = BTreeMap::new();
    let mut priors: HashMap<EntryKey, DVector<f64>> = prior_sig;
    let bias_sigma = if config.scenario.noiseless {
        1e-8
    } else {
        sim_cfg.priors.bias_turnon
    };

    match config.estimator.init {
        InitMode::Truth => {
            let (pose_b, vel_b, _, _) = sim
                .truth_init
                .get(&base)
                .ok_or_else(|| RunError::Init("no truth record for the base IMU".into()))?;
            let stamp_b = first_stamp(sim, base)
                .ok_or_else(|| RunError::Init("base IMU emitted no samples".into()))?;
            imus.insert(
                base,
                ImuMean {
                    rot: pose_b.rot,
                    bg: Vec3::zeros(),
                    vel: *vel_b,
                    ba: Vec3::zeros(),
                    pos: pose_b.pos,
                    stamp: stamp_b,
                },
            );
            for i in 1..sim_cfg.imus.len() {
                let id = ImuId(i as u32);
                let cal = &calib_est.imu[&id];
                let (_, vel_i, _, _) = sim
                    .truth_init
                    .get(&id)
                    .ok_or_else(|| RunError::Init(format!("no truth record for {id}")))?;
                imus.insert(
                    id,
                    ImuMean {
                        rot: cal.rot.inverse().compose(&pose_b.rot),
                        bg: Vec3::zeros(),
                        vel: *vel_i,
                        ba: Vec3::zeros(),
                        pos: pose_b.pos + pose_b.rot.rotate_inv(&cal.pos),
                        stamp: stamp_b + cal.time_offset,
                    },
                );
            }

            for (idx, id) in imus.keys().copied().enumerate().collect::<Vec<_>>() {
                let (th, p, v) = if id == base {
                    (1e-4, 1e-5, 1e-4)
                } else {
                    let lever = calib_est.imu[&id].pos.norm();
                    let th = (sim_cfg.priors.rot.powi(2) + 1e-8).sqrt();
                    let p = (sim_cfg.priors.pos.powi(2)
                        + (sim_cfg.priors.rot * lever).powi(2)
                        + 1e-10)
                        .sqrt();
                    (th, p, 0.01)
                };
                let _ = idx;
                let (th, p, v) = if config.scenario.noiseless {
                    (1e-6, 1e-7, 1e-6)
                } else {
                    (th, p, v)
                };
                priors.insert(EntryKey::ImuTheta(id), DVector::from_element(3, th));
                priors.insert(EntryKey::ImuPos(id), DVector::from_element(3, p));
                priors.insert(EntryKey::ImuVel(id), DVector::from_element(3, v));
                priors.insert(EntryKey::ImuBg(id), DVector::from_element(3, bias_sigma));
                priors.insert(EntryKey::ImuBa(id), DVector::from_element(3, bias_sigma));
            }
        }
        InitMode::Static => {
            let st = static_init(sim, sim_cfg, &calib_est)?;
            imus = st.0;
            for (k, v) in st.1 {
                priors.insert(k, v);
            }
        }
    }

    Ok(FullState::new(
        base,
        CamId(0),
        imus,
        calib_est,
        config.estimator.window_size + 1,
        config.estimator.fej,
        &priors,
    ))
}

fn first_stamp(sim: &SimOutput, id: ImuId) -> Option<f64> {
    sim.events.iter().find_map(|e| match &e.event {
        Event::Imu(i, s) if *i == id => Some(s.stamp),
        _ => None,
    })
}

type StaticInit = (BTreeMap<ImuId, ImuMean>, Vec<(EntryKey, DVector<f64>)>);

/// Stationary initialization: average the first second of base-IMU data,
/// align gravity (zero yaw), zero velocity and position.
fn static_init(
    sim: &SimOutput,
    sim_cfg: &SimConfig,
    calib_est: &CalibrationBlock,
) -> Result<StaticInit, RunError> {
    let window = 1.0;
    let base = ImuId(0);
    let mut acc = Vec3::zeros();
    let mut gyr = Vec3::zeros();
    let mut n = 0usize;
    let mut last_stamp = 0.0;
    for e in &sim.events {
        if let Event::Imu(id, s) = &e.event {
            if *id == base {
                if n == 0 {
                    last_stamp = s.stamp;
                }
                if s.stamp - last_stamp > window && n > 10 {
                    last_stamp = s.stamp;
                    break;
                }
                acc += s.accel;
                gyr += s.gyro;
                n += 1;
                last_stamp = s.stamp;
            }
        }
    }
    if n < 20 {
        return Err(RunError::Init("not enough samples for static init".into()));
    }
    let acc = acc / n as f64;
    let bg = gyr / n as f64;
    // R g_hat = a_hat with g along +z: minimal rotation taking z to a_hat
    let a_dir = acc.normalize();
    let z = Vec3::z();
    let axis = z.cross(&a_dir);
    let angle = z.dot(&a_dir).clamp(-1.0, 1.0).acos();
    let rot = if axis.norm() < 1e-9 {
        crate::manifold::Rotation::identity()
    } else {
        crate::manifold::Rotation::exp(&(axis.normalize() * angle))
    };
    let pose_b = Pose::new(rot, Vec3::zeros());
    let mut imus = BTreeMap::new();
    imus.insert(
        base,
        ImuMean {
            rot,
            bg,
            vel: Vec3::zeros(),
            ba: Vec3::zeros(),
            pos: Vec3::zeros(),
            stamp: last_stamp,
        },
    );
    let mut priors = vec![
        (
            EntryKey::ImuTheta(base),
            DVector::from_column_slice(&[2e-3, 2e-3, 1e-4]),
        ),
        (EntryKey::ImuPos(base), DVector::from_element(3, 1e-6)),
        (EntryKey::ImuVel(base), DVector::from_element(3, 1e-3)),
        (EntryKey::ImuBg(base), DVector::from_element(3, 2e-3)),
        (EntryKey::ImuBa(base), DVector::from_element(3, 0.01)),
    ];
    for i in 1..sim_cfg.imus.len() {
        let id = ImuId(i as u32);
        let cal = &calib_est.imu[&id];
        imus.insert(
            id,
            ImuMean {
                rot: cal.rot.inverse().compose(&pose_b.rot),
                bg: Vec3::zeros(),
                vel: Vec3::zeros(),
                ba: Vec3::zeros(),
                pos: pose_b.pos + pose_b.rot.rotate_inv(&cal.pos),
                stamp: last_stamp + cal.time_offset,
            },
        );
        priors.push((EntryKey::ImuTheta(id), DVector::from_element(3, 0.02)));
        priors.push((EntryKey::ImuPos(id), DVector::from_element(3, 0.02)));
        priors.push((EntryKey::ImuVel(id), DVector::from_element(3, 1e-2)));
        priors.push((EntryKey::ImuBg(id), DVector::from_element(3, 2e-3)));
        priors.push((EntryKey::ImuBa(id), DVector::from_element(3, 0.01)));
    }
    Ok((imus, priors))
}

/// Execute one seeded run end to end.
pub fn run_single(config: &RunConfig, seed: u64) -> Result<RunArtifacts, RunError> {
    let sim_cfg = config.sim_config();
    let sim = simulate(&sim_cfg, seed);
    run_on_events(config, &sim_cfg, &sim, seed)
}

/// Replay a prepared measurement stream through a freshly initialized
/// estimator and evaluate against truth.
pub fn run_on_events(
    config: &RunConfig,
    sim_cfg: &SimConfig,
    sim: &SimOutput,
    seed: u64,
) -> Result<RunArtifacts, RunError> {
    let state = initial_state(config, sim, sim_cfg, seed)?;
    let est_cfg: EstimatorConfig = config.estimator_config();
    let mut imu_rates = BTreeMap::new();
    for (i, imu) in sim_cfg.imus.iter().enumerate() {
        imu_rates.insert(ImuId(i as u32), imu.rate);
    }
    let mut cam_rates = BTreeMap::new();
    for (i, cam) in sim_cfg.cams.iter().enumerate() {
        cam_rates.insert(CamId(i as u32), cam.rate);
    }
    let mut est = Estimator::new(state, est_cfg, imu_rates, cam_rates);

    // skip events before the filter's initial time (static init consumes
    // the hold window; truth init starts at the first sample)
    let t_skip = est.state.imus[&est.state.base_imu].stamp;
    let toff_cb_true = sim_cfg.cams[0].time_offset;

    let mut aborted = false;
    let mut seen_snaps = 0usize;
    // spline-exact truth at snapshot times (the 100 Hz grid written to disk
    // would alias fast rotation into the metrics)
    let truth_exact = |t: f64| sim.spline.pose(t).ok();
    'replay: for ev in &sim.events {
        match &ev.event {
            Event::Imu(id, s) => {
                if s.stamp <= t_skip && *id == est.state.base_imu {
                    continue;
                }
                est.handle_imu(*id, *s)?;
            }
            Event::Frame(cam, stamp, obs) => {
                if ev.time <= t_skip + 0.05 {
                    continue;
                }
                est.handle_frame(*cam, *stamp, obs.clone())?;
            }
        }
        // divergence monitor on freshly published snapshots
        while seen_snaps < est.snapshots.len() {
            let snap = &est.snapshots[seen_snaps];
            seen_snaps += 1;
            let t_phys = snap.t_cam + toff_cb_true;
            if let Some(truth) = truth_exact(t_phys) {
                let e_th = quat_error_vector(&truth.rot, &snap.pose.rot);
                let e_p = truth.pos - snap.pose.pos;
                let mut e = nalgebra::SVector::<f64, 6>::zeros();
                for i in 0..3 {
                    e[i] = e_th[i];
                    e[3 + i] = e_p[i];
                }
                let nees = snap
                    .cov
                    .cholesky()
                    .map(|c| (e.transpose() * c.solve(&e))[(0, 0)])
                    .unwrap_or(f64::INFINITY);
                if nees > DIVERGENCE_NEES || !nees.is_finite() {
                    aborted = true;
                    break 'replay;
                }
            }
        }
    }

    let truth_series: Vec<(f64, Pose)> = est
        .snapshots
        .iter()
        .filter_map(|s| {
            let t = s.t_cam + toff_cb_true;
            truth_exact(t).map(|p| (t, p))
        })
        .collect();
    let report = evaluate_run(&est.snapshots, &truth_series, toff_cb_true, seed, aborted);
    let calib_errors = calib_error_summary(&est.snapshots, &sim.truth_calib);
    Ok(RunArtifacts {
        seed,
        report,
        stats: est.stats.clone(),
        snapshots: est.snapshots,
        truth_poses: sim.truth_poses.clone(),
        truth_calib: sim.truth_calib.clone(),
        calib_errors,
        aborted,
    })
}

fn evaluate_run(
    snapshots: &[Snapshot],
    truth: &[(f64, Pose)],
    toff_cb_true: f64,
    seed: u64,
    aborted: bool,
) -> EvalReport {
    let est_traj: Vec<(f64, Pose)> = snapshots
        .iter()
        .map(|s| (s.t_cam + toff_cb_true, s.pose))
        .collect();
    let (ate_deg, ate_m) = evaluation::align_and_ate(&est_traj, truth, AlignMode::PosYaw)
        .unwrap_or((f64::NAN, f64::NAN));
    let rpe = evaluation::rpe(&est_traj, truth, &RPE_LENGTHS).unwrap_or_default();
    let series: Vec<(f64, Pose, crate::resilience::Mat6)> = snapshots
        .iter()
        .map(|s| (s.t_cam + toff_cb_true, s.pose, s.cov))
        .collect();
    let (coverage, nees_mean) =
        evaluation::consistency(&series, truth).unwrap_or(([f64::NAN; 6], f64::NAN));
    EvalReport {
        ate_deg,
        ate_m,
        rpe,
        coverage,
        nees_mean,
        matched_pairs: est_traj.len(),
        aborted,
        seed,
    }
}

fn calib_error_summary(snapshots: &[Snapshot], truth: &CalibrationBlock) -> CalibErrorSummary {
    let mut out = CalibErrorSummary::default();
    let Some(last) = snapshots.last() else {
        return out;
    };
    for (id, tr) in &truth.imu {
        if let Some(est) = last.calib.imu.get(id) {
            out.imu_rot_deg.push(
                quat_error_vector(&tr.rot, &est.rot).norm().to_degrees(),
            );
            out.imu_pos_m.push((tr.pos - est.pos).norm());
            out.imu_toff_s.push((tr.time_offset - est.time_offset).abs());
        }
    }
    for (id, tr) in &truth.cam {
        if let Some(est) = last.calib.cam.get(id) {
            out.cam_rot_deg.push(
                quat_error_vector(&tr.rot, &est.rot).norm().to_degrees(),
            );
            out.cam_pos_m.push((tr.pos - est.pos).norm());
            out.cam_toff_s.push((tr.time_offset - est.time_offset).abs());
            out.cam_readout_s
                .push((tr.intr.readout - est.intr.readout).abs());
        }
    }
    out
}

/// Aggregate statistics over a Monte-Carlo batch.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub aborted: usize,
    pub ate_deg_mean: f64,
    pub ate_m_mean: f64,
    pub ate_m_std: f64,
    pub nees_mean: f64,
    pub coverage_min: f64,
    pub coverage_mean: [f64; 6],
    pub reports: Vec<EvalReport>,
}

/// Independent seeded runs in parallel; aborted runs are excluded from the
/// aggregates but reported in the count.
pub fn run_monte_carlo(config: &RunConfig, n_runs: usize) -> Vec<Result<RunArtifacts, RunError>> {
    (0..n_runs)
        .into_par_iter()
        .map(|i| run_single(config, config.seed + i as u64))
        .collect()
}

pub fn aggregate(results: &[Result<RunArtifacts, RunError>]) -> Aggregate {
    let ok: Vec<&RunArtifacts> = results
        .iter()
        .filter_map(|r| r.as_ref().ok())
        .filter(|a| !a.aborted && a.report.ate_m.is_finite())
        .collect();
    let aborted = results.len() - ok.len();
    let ates_m: Vec<f64> = ok.iter().map(|a| a.report.ate_m).collect();
    let ates_deg: Vec<f64> = ok.iter().map(|a| a.report.ate_deg).collect();
    let neess: Vec<f64> = ok.iter().map(|a| a.report.nees_mean).collect();
    let mut coverage_mean = [0.0; 6];
    for a in &ok {
        for i in 0..6 {
            coverage_mean[i] += a.report.coverage[i] / ok.len().max(1) as f64;
        }
    }
    Aggregate {
        runs: results.len(),
        aborted,
        ate_deg_mean: evaluation::mean(&ates_deg),
        ate_m_mean: evaluation::mean(&ates_m),
        ate_m_std: evaluation::std_dev(&ates_m),
        nees_mean: evaluation::mean(&neess),
        coverage_min: coverage_mean.iter().copied().fold(f64::INFINITY, f64::min),
        coverage_mean,
        reports: results
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .map(|a| a.report.clone())
            .collect(),
    }
}
