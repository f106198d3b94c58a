//! Text file formats: measurement logs, ground-truth pose files, failure
//! scripts, and state-snapshot logs. All floats are written with Rust's
//! shortest-roundtrip formatting, so reading a file back reproduces the
//! exact bits.
//!
//! Measurement log (one record per line, time-sorted):
//!
//! ```text
//! INIT imu<k> <stamp> qx qy qz qw px py pz vx vy vz bgx bgy bgz bax bay baz
//! IMU imu<k> <stamp> wx wy wz ax ay az
//! FRAME cam<k> <stamp> <n-observations>
//! FEAT cam<k> <feature-id> <stamp> <u> <v>
//! ```
//!
//! Ground truth: `<t> <px> <py> <pz> <qx> <qy> <qz> <qw>` with the
//! quaternion in JPL order (vector first, scalar last) for the rotation
//! mapping global into the base IMU frame.
//!
//! Failure script: `<time-s> <sensor> fail` per line, e.g. `30.0 imu0 fail`.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector4;

use crate::camera::Vec2;
use crate::estimator::Snapshot;
use crate::manifold::{Rotation, Vec3};
use crate::simulator::{Event, SimOutput, TimedEvent};
use crate::state::{CamId, FeatureId, ImuId};
use crate::Pose;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Truth initialization record carried in a measurement log.
#[derive(Debug, Clone, Copy)]
pub struct InitRecord {
    pub imu: ImuId,
    pub stamp: f64,
    pub pose: Pose,
    pub vel: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
}

/// Parsed measurement log.
#[derive(Debug, Default)]
pub struct MeasurementLog {
    pub init: Vec<InitRecord>,
    pub events: Vec<Event>,
}

pub fn write_measurement_log(path: &Path, out: &SimOutput) -> Result<(), IoError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# measurement log v1")?;
    for (id, (pose, vel, bg, ba)) in &out.truth_init {
        let q = pose.rot.quat_xyzw();
        write!(w, "INIT {id} {}", fmt(pose_stamp(out, *id)))?;
        for v in [q.x, q.y, q.z, q.w] {
            write!(w, " {}", fmt(v))?;
        }
        for v in [pose.pos, *vel, *bg, *ba] {
            write!(w, " {} {} {}", fmt(v.x), fmt(v.y), fmt(v.z))?;
        }
        writeln!(w)?;
    }
    for ev in &out.events {
        match &ev.event {
            Event::Imu(id, s) => {
                writeln!(
                    w,
                    "IMU {id} {} {} {} {} {} {} {}",
                    fmt(s.stamp),
                    fmt(s.gyro.x),
                    fmt(s.gyro.y),
                    fmt(s.gyro.z),
                    fmt(s.accel.x),
                    fmt(s.accel.y),
                    fmt(s.accel.z)
                )?;
            }
            Event::Frame(cam, stamp, obs) => {
                writeln!(w, "FRAME {cam} {} {}", fmt(*stamp), obs.len())?;
                for (fid, px) in obs {
                    writeln!(
                        w,
                        "FEAT {cam} {} {} {} {}",
                        fid.0,
                        fmt(*stamp),
                        fmt(px.x),
                        fmt(px.y)
                    )?;
                }
            }
        }
    }
    Ok(())
}

fn pose_stamp(out: &SimOutput, id: ImuId) -> f64 {
    // the INIT record stamp is the IMU's first sample time in its own clock
    out.events
        .iter()
        .find_map(|e| match &e.event {
            Event::Imu(i, s) if *i == id => Some(s.stamp),
            _ => None,
        })
        .unwrap_or(0.0)
}

pub fn read_measurement_log(path: &Path) -> Result<MeasurementLog, IoError> {
    let f = std::fs::File::open(path)?;
    let mut log = MeasurementLog::default();
    let mut current_frame: Option<(CamId, f64, Vec<(FeatureId, Vec2)>, usize)> = None;
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let kind = it.next().unwrap_or("");
        let err = |msg: &str| IoError::Parse {
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let flush = |log: &mut MeasurementLog,
                     frame: &mut Option<(CamId, f64, Vec<(FeatureId, Vec2)>, usize)>| {
            if let Some((cam, stamp, obs, _)) = frame.take() {
                log.events.push(Event::Frame(cam, stamp, obs));
            }
        };
        match kind {
            "INIT" => {
                flush(&mut log, &mut current_frame);
                let imu = parse_imu(it.next().ok_or_else(|| err("missing imu"))?)
                    .ok_or_else(|| err("bad imu id"))?;
                let v: Vec<f64> = it.map(|s| s.parse().unwrap_or(f64::NAN)).collect();
                if v.len() != 17 || v.iter().any(|x| x.is_nan()) {
                    return Err(err("INIT needs 17 numeric fields"));
                }
                log.init.push(InitRecord {
                    imu,
                    stamp: v[0],
                    pose: Pose::new(
                        Rotation::from_quat_xyzw(Vector4::new(v[1], v[2], v[3], v[4])),
                        Vec3::new(v[5], v[6], v[7]),
                    ),
                    vel: Vec3::new(v[8], v[9], v[10]),
                    bg: Vec3::new(v[11], v[12], v[13]),
                    ba: Vec3::new(v[14], v[15], v[16]),
                });
            }
            "IMU" => {
                flush(&mut log, &mut current_frame);
                let imu = parse_imu(it.next().ok_or_else(|| err("missing imu"))?)
                    .ok_or_else(|| err("bad imu id"))?;
                let v: Vec<f64> = it.map(|s| s.parse().unwrap_or(f64::NAN)).collect();
                if v.len() != 7 || v.iter().any(|x| x.is_nan()) {
                    return Err(err("IMU needs 7 numeric fields"));
                }
                log.events.push(Event::Imu(
                    imu,
                    crate::propagation::ImuSample {
                        stamp: v[0],
                        gyro: Vec3::new(v[1], v[2], v[3]),
                        accel: Vec3::new(v[4], v[5], v[6]),
                    },
                ));
            }
            "FRAME" => {
                flush(&mut log, &mut current_frame);
                let cam = parse_cam(it.next().ok_or_else(|| err("missing cam"))?)
                    .ok_or_else(|| err("bad cam id"))?;
                let stamp: f64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad stamp"))?;
                let n: usize = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad count"))?;
                current_frame = Some((cam, stamp, Vec::with_capacity(n), n));
            }
            "FEAT" => {
                let cam = parse_cam(it.next().ok_or_else(|| err("missing cam"))?)
                    .ok_or_else(|| err("bad cam id"))?;
                let fid: u64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad feature id"))?;
                let stamp: f64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad stamp"))?;
                let u: f64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad u"))?;
                let v: f64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err("bad v"))?;
                match current_frame.as_mut() {
                    Some((fcam, fstamp, obs, _)) if *fcam == cam && *fstamp == stamp => {
                        obs.push((FeatureId(fid), Vec2::new(u, v)));
                    }
                    _ => {
                        // standalone track record (the generic ingestion
                        // contract): open a single-frame group
                        flush(&mut log, &mut current_frame);
                        current_frame =
                            Some((cam, stamp, vec![(FeatureId(fid), Vec2::new(u, v))], 1));
                    }
                }
            }
            other => return Err(err(&format!("unknown record '{other}'"))),
        }
    }
    if let Some((cam, stamp, obs, _)) = current_frame.take() {
        log.events.push(Event::Frame(cam, stamp, obs));
    }
    Ok(log)
}

fn parse_imu(s: &str) -> Option<ImuId> {
    s.strip_prefix("imu").and_then(|n| n.parse().ok()).map(ImuId)
}

fn parse_cam(s: &str) -> Option<CamId> {
    s.strip_prefix("cam").and_then(|n| n.parse().ok()).map(CamId)
}

pub fn write_ground_truth(path: &Path, poses: &[(f64, Pose)]) -> Result<(), IoError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# t px py pz qx qy qz qw (q maps global into base IMU)")?;
    for (t, p) in poses {
        let q = p.rot.quat_xyzw();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            fmt(*t),
            fmt(p.pos.x),
            fmt(p.pos.y),
            fmt(p.pos.z),
            fmt(q.x),
            fmt(q.y),
            fmt(q.z),
            fmt(q.w)
        )?;
    }
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<(f64, Pose)>, IoError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse().unwrap_or(f64::NAN))
            .collect();
        if v.len() != 8 || v.iter().any(|x| x.is_nan()) {
            return Err(IoError::Parse {
                line: lineno + 1,
                msg: "ground truth needs 8 numeric fields".into(),
            });
        }
        out.push((
            v[0],
            Pose::new(
                Rotation::from_quat_xyzw(Vector4::new(v[4], v[5], v[6], v[7])),
                Vec3::new(v[1], v[2], v[3]),
            ),
        ));
    }
    Ok(out)
}

/// Failure script: lines of `<time_s> <sensor> fail`.
pub fn read_failure_script(path: &Path) -> Result<Vec<(f64, String)>, IoError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[2] != "fail" {
            return Err(IoError::Parse {
                line: lineno + 1,
                msg: "expected '<time> <sensor> fail'".into(),
            });
        }
        let t: f64 = parts[0].parse().map_err(|_| IoError::Parse {
            line: lineno + 1,
            msg: "bad time".into(),
        })?;
        out.push((t, parts[1].to_string()));
    }
    Ok(out)
}

/// Snapshot log: `S` lines carry the pose record (timestamp, pose, velocity,
/// upper-triangular pose covariance), `C` lines one named calibration entry
/// with values and marginal sigmas.
pub fn write_snapshots(path: &Path, snaps: &[Snapshot]) -> Result<(), IoError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "# S t_cam t_imu_est qx qy qz qw px py pz vx vy vz cov-upper-21"
    )?;
    writeln!(w, "# C t_imu_est name dim values... sigmas...")?;
    for s in snaps {
        let q = s.pose.rot.quat_xyzw();
        write!(w, "S {} {}", fmt(s.t_cam), fmt(s.t_imu_est))?;
        for v in [q.x, q.y, q.z, q.w] {
            write!(w, " {}", fmt(v))?;
        }
        for v in [s.pose.pos, s.vel] {
            write!(w, " {} {} {}", fmt(v.x), fmt(v.y), fmt(v.z))?;
        }
        for r in 0..6 {
            for c in r..6 {
                write!(w, " {}", fmt(s.cov[(r, c)]))?;
            }
        }
        writeln!(w)?;
        for (key, sig) in &s.calib_sigma {
            let vals = calib_entry_values(s, *key);
            write!(w, "C {} {} {}", fmt(s.t_imu_est), key.name(), sig.len())?;
            for v in &vals {
                write!(w, " {}", fmt(*v))?;
            }
            for v in sig {
                write!(w, " {}", fmt(*v))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

fn calib_entry_values(s: &Snapshot, key: crate::state::EntryKey) -> Vec<f64> {
    use crate::state::EntryKey as K;
    match key {
        K::CalImuTheta(i) => s
            .calib
            .imu
            .get(&i)
            .map(|c| c.rot.quat_xyzw().iter().copied().collect())
            .unwrap_or_default(),
        K::CalImuPos(i) => s
            .calib
            .imu
            .get(&i)
            .map(|c| vec![c.pos.x, c.pos.y, c.pos.z])
            .unwrap_or_default(),
        K::CalImuTime(i) => s
            .calib
            .imu
            .get(&i)
            .map(|c| vec![c.time_offset])
            .unwrap_or_default(),
        K::CalCamTheta(c) => s
            .calib
            .cam
            .get(&c)
            .map(|c| c.rot.quat_xyzw().iter().copied().collect())
            .unwrap_or_default(),
        K::CalCamPos(c) => s
            .calib
            .cam
            .get(&c)
            .map(|c| vec![c.pos.x, c.pos.y, c.pos.z])
            .unwrap_or_default(),
        K::CalCamTime(c) => s
            .calib
            .cam
            .get(&c)
            .map(|c| vec![c.time_offset])
            .unwrap_or_default(),
        K::CalCamProj(c) => s
            .calib
            .cam
            .get(&c)
            .map(|c| vec![c.intr.fx, c.intr.fy, c.intr.px, c.intr.py])
            .unwrap_or_default(),
        K::CalCamDist(c) => s
            .calib
            .cam
            .get(&c)
            .map(|c| c.intr.dist.to_vec())
            .unwrap_or_default(),
        K::CalCamReadout(c) => s
            .calib
            .cam
            .get(&c)
            .map(|c| vec![c.intr.readout])
            .unwrap_or_default(),
        _ => Vec::new(),
    }
}

fn fmt(v: f64) -> String {
    // shortest representation that round-trips exactly
    format!("{v}")
}

/// Replay a simulator output or parsed log into estimator calls.
pub fn events_of(out: &SimOutput) -> impl Iterator<Item = &TimedEvent> {
    out.events.iter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::SimConfig;

    #[test]
    fn measurement_log_roundtrip_bit_exact() {
        let mut config = SimConfig::default_scenario(2, 2);
        config.duration = 2.0;
        let out = crate::simulator::simulate(&config, 11);
        let dir = std::env::temp_dir().join("mivins_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.txt");
        write_measurement_log(&path, &out).unwrap();
        let log = read_measurement_log(&path).unwrap();
        assert_eq!(log.init.len(), out.truth_init.len());
        assert_eq!(log.events.len(), out.events.len());
        for (a, b) in log.events.iter().zip(&out.events) {
            match (a, &b.event) {
                (Event::Imu(ia, sa), Event::Imu(ib, sb)) => {
                    assert_eq!(ia, ib);
                    assert_eq!(sa.stamp.to_bits(), sb.stamp.to_bits());
                    assert_eq!(sa.gyro, sb.gyro);
                    assert_eq!(sa.accel, sb.accel);
                }
                (Event::Frame(ca, ta, oa), Event::Frame(cb, tb, ob)) => {
                    assert_eq!(ca, cb);
                    assert_eq!(ta.to_bits(), tb.to_bits());
                    assert_eq!(oa, ob);
                }
                _ => panic!("event kind mismatch"),
            }
        }
    }

    #[test]
    fn ground_truth_roundtrip() {
        let mut config = SimConfig::default_scenario(1, 1);
        config.duration = 1.0;
        let out = crate::simulator::simulate(&config, 3);
        let dir = std::env::temp_dir().join("mivins_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("gt.txt");
        write_ground_truth(&path, &out.truth_poses).unwrap();
        let back = read_ground_truth(&path).unwrap();
        assert_eq!(back.len(), out.truth_poses.len());
        for ((ta, pa), (tb, pb)) in back.iter().zip(&out.truth_poses) {
            assert_eq!(ta.to_bits(), tb.to_bits());
            assert_eq!(pa.pos, pb.pos);
            assert_eq!(pa.rot.quat_xyzw(), pb.rot.quat_xyzw());
        }
    }

    #[test]
    fn failure_script_parses() {
        let dir = std::env::temp_dir().join("mivins_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fail.txt");
        std::fs::write(&path, "# script\n15.0 cam1 fail\n30 imu0 fail\n").unwrap();
        let s = read_failure_script(&path).unwrap();
        assert_eq!(s, vec![(15.0, "cam1".into()), (30.0, "imu0".into())]);
        std::fs::write(&path, "15.0 cam1 explode\n").unwrap();
        assert!(read_failure_script(&path).is_err());
    }
}
