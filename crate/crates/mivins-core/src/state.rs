//! Joint filter state: IMU navigation states, the sliding window of base-IMU
//! clones, the calibration block, SLAM features, and the dense error
//! covariance over all of it.
//!
//! Every Jacobian in the crate addresses covariance columns through
//! [`EntryKey`], never through raw offsets, so cloning and marginalization
//! cannot silently shift a block under a consumer.
//!
//! Error-state ordering per IMU is `(theta, bg, v, ba, p)`; attitude errors
//! follow the multiplicative convention of [`crate::manifold`]
//! (`R = Exp(-theta) * R_hat`), all other errors are additive
//! (`x = x_hat + delta`).

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};

use crate::camera::Intrinsics;
use crate::manifold::{Rotation, Vec3};
use crate::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImuId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CamId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CloneId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(pub u64);

impl std::fmt::Display for ImuId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "imu{}", self.0)
    }
}

impl std::fmt::Display for CamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cam{}", self.0)
    }
}

/// Addressable slice of the error state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryKey {
    ImuTheta(ImuId),
    ImuBg(ImuId),
    ImuVel(ImuId),
    ImuBa(ImuId),
    ImuPos(ImuId),
    CloneTheta(CloneId),
    ClonePos(CloneId),
    /// Auxiliary-IMU extrinsic orientation w.r.t. the base IMU.
    CalImuTheta(ImuId),
    CalImuPos(ImuId),
    CalImuTime(ImuId),
    /// Camera extrinsic orientation w.r.t. the base IMU.
    CalCamTheta(CamId),
    CalCamPos(CamId),
    /// Base camera: offset to the base IMU clock. Auxiliary camera: offset to
    /// the base camera clock.
    CalCamTime(CamId),
    /// `fx fy px py`
    CalCamProj(CamId),
    /// Distortion coefficients.
    CalCamDist(CamId),
    CalCamReadout(CamId),
    Feature(FeatureId),
}

impl EntryKey {
    pub fn dim(&self) -> usize {
        match self {
            EntryKey::ImuTheta(_)
            | EntryKey::ImuBg(_)
            | EntryKey::ImuVel(_)
            | EntryKey::ImuBa(_)
            | EntryKey::ImuPos(_)
            | EntryKey::CloneTheta(_)
            | EntryKey::ClonePos(_)
            | EntryKey::CalImuTheta(_)
            | EntryKey::CalImuPos(_)
            | EntryKey::CalCamTheta(_)
            | EntryKey::CalCamPos(_)
            | EntryKey::Feature(_) => 3,
            EntryKey::CalImuTime(_) | EntryKey::CalCamTime(_) | EntryKey::CalCamReadout(_) => 1,
            EntryKey::CalCamProj(_) | EntryKey::CalCamDist(_) => 4,
        }
    }

    /// Calibration entries are exempt from first-estimate freezing.
    pub fn is_calibration(&self) -> bool {
        matches!(
            self,
            EntryKey::CalImuTheta(_)
                | EntryKey::CalImuPos(_)
                | EntryKey::CalImuTime(_)
                | EntryKey::CalCamTheta(_)
                | EntryKey::CalCamPos(_)
                | EntryKey::CalCamTime(_)
                | EntryKey::CalCamProj(_)
                | EntryKey::CalCamDist(_)
                | EntryKey::CalCamReadout(_)
        )
    }

    pub fn name(&self) -> String {
        match self {
            EntryKey::ImuTheta(i) => format!("{i}:q"),
            EntryKey::ImuBg(i) => format!("{i}:bg"),
            EntryKey::ImuVel(i) => format!("{i}:v"),
            EntryKey::ImuBa(i) => format!("{i}:ba"),
            EntryKey::ImuPos(i) => format!("{i}:p"),
            EntryKey::CloneTheta(c) => format!("clone{}:q", c.0),
            EntryKey::ClonePos(c) => format!("clone{}:p", c.0),
            EntryKey::CalImuTheta(i) => format!("cal:{i}:q"),
            EntryKey::CalImuPos(i) => format!("cal:{i}:p"),
            EntryKey::CalImuTime(i) => format!("cal:{i}:toff"),
            EntryKey::CalCamTheta(c) => format!("cal:{c}:q"),
            EntryKey::CalCamPos(c) => format!("cal:{c}:p"),
            EntryKey::CalCamTime(c) => format!("cal:{c}:toff"),
            EntryKey::CalCamProj(c) => format!("cal:{c}:proj"),
            EntryKey::CalCamDist(c) => format!("cal:{c}:dist"),
            EntryKey::CalCamReadout(c) => format!("cal:{c}:readout"),
            EntryKey::Feature(f) => format!("feat{}", f.0),
        }
    }
}

/// Navigation state of one IMU, with its own-clock time of validity.
#[derive(Debug, Clone, Copy)]
pub struct ImuMean {
    /// `q_IG`: rotation from global into this IMU frame.
    pub rot: Rotation,
    pub bg: Vec3,
    pub vel: Vec3,
    pub ba: Vec3,
    pub pos: Vec3,
    /// Time of validity, in this IMU's own clock.
    pub stamp: f64,
}

impl ImuMean {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rot, self.pos)
    }
}

/// Stochastic clone of the base-IMU pose at a base-camera imaging time.
#[derive(Debug, Clone, Copy)]
pub struct CloneState {
    /// Nominal imaging time in the base-camera clock.
    pub stamp: f64,
    pub pose: Pose,
    /// Mean-only caches for interpolation residuals (not part of the error
    /// state): velocity and the estimated base-IMU-clock time at augment.
    pub vel: Vec3,
    pub imu_stamp: f64,
}

/// Spatiotemporal extrinsics of an auxiliary IMU w.r.t. the base IMU.
#[derive(Debug, Clone, Copy)]
pub struct ImuCalib {
    /// `q_{Ib,Ii}`: maps auxiliary-IMU-frame vectors into the base IMU frame.
    pub rot: Rotation,
    /// Auxiliary IMU origin in the base IMU frame.
    pub pos: Vec3,
    /// `t_Ii = t_Ib + time_offset` for the same physical instant.
    pub time_offset: f64,
}

/// Full calibration of one camera.
#[derive(Debug, Clone)]
pub struct CamCalib {
    /// `q_{C,Ib}`: maps base-IMU-frame vectors into the camera frame.
    pub rot: Rotation,
    /// Base-IMU origin in the camera frame.
    pub pos: Vec3,
    /// Base camera: `t_Ib = t_Cb + time_offset`. Auxiliary camera:
    /// `t_Cb = t_Ci + time_offset`.
    pub time_offset: f64,
    pub intr: Intrinsics,
}

/// Per-IMU and per-camera calibration state.
#[derive(Debug, Clone, Default)]
pub struct CalibrationBlock {
    /// Auxiliary IMUs only (the base has no extrinsics to itself).
    pub imu: BTreeMap<ImuId, ImuCalib>,
    pub cam: BTreeMap<CamId, CamCalib>,
}

#[derive(Debug, Clone, Copy)]
pub struct SlamFeature {
    pub pos: Vec3,
}

/// Value of one state entry, in the same representation used for snapshots
/// and the FEJ registry (rotations as JPL quaternions).
#[derive(Debug, Clone, PartialEq)]
pub enum EntryValue {
    Rot(Rotation),
    Vec(DVector<f64>),
}

impl EntryValue {
    pub fn vec3(v: Vec3) -> Self {
        EntryValue::Vec(DVector::from_column_slice(v.as_slice()))
    }

    pub fn scalar(s: f64) -> Self {
        EntryValue::Vec(DVector::from_element(1, s))
    }

    pub fn as_rot(&self) -> Rotation {
        match self {
            EntryValue::Rot(r) => *r,
            EntryValue::Vec(_) => panic!("entry value is not a rotation"),
        }
    }

    pub fn as_vec3(&self) -> Vec3 {
        match self {
            EntryValue::Vec(v) if v.len() == 3 => Vec3::new(v[0], v[1], v[2]),
            _ => panic!("entry value is not a 3-vector"),
        }
    }

    pub fn as_scalar(&self) -> f64 {
        match self {
            EntryValue::Vec(v) if v.len() == 1 => v[0],
            _ => panic!("entry value is not a scalar"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("clone window is full ({0} clones); marginalize first")]
    WindowFull(usize),
    #[error("unknown state entry {0:?}")]
    UnknownEntry(EntryKey),
    #[error("cannot marginalize the base IMU {0}; switch base first")]
    BaseImuMarginalization(ImuId),
}

/// Sparse row-block Jacobian: one block per referenced entry.
pub type JacobianBlocks = Vec<(EntryKey, DMatrix<f64>)>;

#[derive(Debug, Clone)]
pub struct FullState {
    pub base_imu: ImuId,
    pub base_cam: CamId,
    pub imus: BTreeMap<ImuId, ImuMean>,
    pub clones: BTreeMap<CloneId, CloneState>,
    pub calib: CalibrationBlock,
    pub features: BTreeMap<FeatureId, SlamFeature>,
    pub max_clones: usize,
    pub fej_enabled: bool,
    cov: DMatrix<f64>,
    order: Vec<EntryKey>,
    offsets: HashMap<EntryKey, usize>,
    fej: HashMap<EntryKey, EntryValue>,
    next_clone: u64,
}

impl FullState {
    /// Assemble the state and a block-diagonal prior covariance from the
    /// per-entry prior standard deviations in `priors` (entries absent from
    /// the map start with zero uncertainty).
    pub fn new(
        base_imu: ImuId,
        base_cam: CamId,
        imus: BTreeMap<ImuId, ImuMean>,
        calib: CalibrationBlock,
        max_clones: usize,
        fej_enabled: bool,
        priors: &HashMap<EntryKey, DVector<f64>>,
    ) -> Self {
        assert!(imus.contains_key(&base_imu), "base IMU missing");
        assert!(calib.cam.contains_key(&base_cam), "base camera missing");
        let mut order = Vec::new();
        for id in imus.keys() {
            order.extend(imu_entries(*id));
        }
        for id in calib.imu.keys() {
            order.extend(imu_calib_entries(*id));
        }
        for id in calib.cam.keys() {
            order.extend(cam_calib_entries(*id));
        }
        let offsets = build_offsets(&order);
        let dim = order.iter().map(|k| k.dim()).sum();
        let mut cov = DMatrix::zeros(dim, dim);
        for key in &order {
            if let Some(sig) = priors.get(key) {
                assert_eq!(sig.len(), key.dim(), "prior dim mismatch for {key:?}");
                let off = offsets[key];
                for i in 0..key.dim() {
                    cov[(off + i, off + i)] = sig[i] * sig[i];
                }
            }
        }
        let mut s = FullState {
            base_imu,
            base_cam,
            imus,
            clones: BTreeMap::new(),
            calib,
            features: BTreeMap::new(),
            max_clones,
            fej_enabled,
            cov,
            order,
            offsets,
            fej: HashMap::new(),
            next_clone: 0,
        };
        for key in s.order.clone() {
            s.fej_register(key);
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cov_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.cov
    }

    pub fn order(&self) -> &[EntryKey] {
        &self.order
    }

    pub fn offset_of(&self, key: EntryKey) -> Option<usize> {
        self.offsets.get(&key).copied()
    }

    pub fn contains(&self, key: EntryKey) -> bool {
        self.offsets.contains_key(&key)
    }

    pub fn aux_imu_ids(&self) -> Vec<ImuId> {
        self.imus.keys().copied().filter(|id| *id != self.base_imu).collect()
    }

    /// Oldest clone first.
    pub fn clones_by_time(&self) -> Vec<(CloneId, &CloneState)> {
        let mut v: Vec<_> = self.clones.iter().map(|(id, c)| (*id, c)).collect();
        v.sort_by(|a, b| a.1.stamp.partial_cmp(&b.1.stamp).unwrap());
        v
    }

    pub fn oldest_clone(&self) -> Option<CloneId> {
        self.clones_by_time().first().map(|(id, _)| *id)
    }

    // ---- values ---------------------------------------------------------

    pub fn value(&self, key: EntryKey) -> Option<EntryValue> {
        Some(match key {
            EntryKey::ImuTheta(i) => EntryValue::Rot(self.imus.get(&i)?.rot),
            EntryKey::ImuBg(i) => EntryValue::vec3(self.imus.get(&i)?.bg),
            EntryKey::ImuVel(i) => EntryValue::vec3(self.imus.get(&i)?.vel),
            EntryKey::ImuBa(i) => EntryValue::vec3(self.imus.get(&i)?.ba),
            EntryKey::ImuPos(i) => EntryValue::vec3(self.imus.get(&i)?.pos),
            EntryKey::CloneTheta(c) => EntryValue::Rot(self.clones.get(&c)?.pose.rot),
            EntryKey::ClonePos(c) => EntryValue::vec3(self.clones.get(&c)?.pose.pos),
            EntryKey::CalImuTheta(i) => EntryValue::Rot(self.calib.imu.get(&i)?.rot),
            EntryKey::CalImuPos(i) => EntryValue::vec3(self.calib.imu.get(&i)?.pos),
            EntryKey::CalImuTime(i) => EntryValue::scalar(self.calib.imu.get(&i)?.time_offset),
            EntryKey::CalCamTheta(c) => EntryValue::Rot(self.calib.cam.get(&c)?.rot),
            EntryKey::CalCamPos(c) => EntryValue::vec3(self.calib.cam.get(&c)?.pos),
            EntryKey::CalCamTime(c) => EntryValue::scalar(self.calib.cam.get(&c)?.time_offset),
            EntryKey::CalCamProj(c) => {
                let i = &self.calib.cam.get(&c)?.intr;
                EntryValue::Vec(DVector::from_column_slice(&[i.fx, i.fy, i.px, i.py]))
            }
            EntryKey::CalCamDist(c) => {
                let i = &self.calib.cam.get(&c)?.intr;
                EntryValue::Vec(DVector::from_column_slice(&i.dist))
            }
            EntryKey::CalCamReadout(c) => {
                EntryValue::scalar(self.calib.cam.get(&c)?.intr.readout)
            }
            EntryKey::Feature(f) => EntryValue::vec3(self.features.get(&f)?.pos),
        })
    }

    // ---- FEJ registry ----------------------------------------------------

    /// Registers the entry's current value as its first estimate. A second
    /// registration for a live entry is a no-op.
    pub fn fej_register(&mut self, key: EntryKey) {
        if self.fej.contains_key(&key) {
            return;
        }
        if let Some(v) = self.value(key) {
            self.fej.insert(key, v);
        }
    }

    /// Overwrites the stored linearization value. Only propagation may do
    /// this (dynamic states' linearization points advance with the mean
    /// propagation, never with updates).
    pub(crate) fn fej_set(&mut self, key: EntryKey, value: EntryValue) {
        self.fej.insert(key, value);
    }

    /// The value Jacobians must be evaluated at: the frozen first estimate,
    /// except for calibration entries which always linearize at the current
    /// estimate, and everything when FEJ is disabled.
    pub fn fej_value(&self, key: EntryKey) -> Option<EntryValue> {
        if !self.fej_enabled || key.is_calibration() {
            return self.value(key);
        }
        self.fej.get(&key).cloned().or_else(|| self.value(key))
    }

    pub fn fej_clone_pose(&self, id: CloneId) -> Option<Pose> {
        let rot = self.fej_value(EntryKey::CloneTheta(id))?.as_rot();
        let pos = self.fej_value(EntryKey::ClonePos(id))?.as_vec3();
        Some(Pose::new(rot, pos))
    }

    pub fn fej_imu_pose(&self, id: ImuId) -> Option<Pose> {
        let rot = self.fej_value(EntryKey::ImuTheta(id))?.as_rot();
        let pos = self.fej_value(EntryKey::ImuPos(id))?.as_vec3();
        Some(Pose::new(rot, pos))
    }

    // ---- structural operations -------------------------------------------

    /// Stochastic cloning: appends a 6-dim pose entry whose error is
    /// `jacobian` times the existing error state. Covariance gains the block
    /// `J P J^T` with cross terms `J P`; the clone's first estimate is
    /// registered.
    pub fn clone_pose(
        &mut self,
        pose: Pose,
        stamp: f64,
        vel: Vec3,
        imu_stamp: f64,
        jacobian: &JacobianBlocks,
    ) -> Result<CloneId, StateError> {
        if self.clones.len() >= self.max_clones {
            return Err(StateError::WindowFull(self.clones.len()));
        }
        let id = CloneId(self.next_clone);
        self.next_clone += 1;

        let dim = self.dim();
        let j = self.assemble_blocks(jacobian, 6)?;
        // grow covariance: [P, P J^T; J P, J P J^T]
        let jp = &j * &self.cov; // 6 x dim
        let jpjt = &jp * j.transpose(); // 6 x 6
        let mut cov = DMatrix::zeros(dim + 6, dim + 6);
        cov.view_mut((0, 0), (dim, dim)).copy_from(&self.cov);
        cov.view_mut((dim, 0), (6, dim)).copy_from(&jp);
        cov.view_mut((0, dim), (dim, 6)).copy_from(&jp.transpose());
        cov.view_mut((dim, dim), (6, 6)).copy_from(&jpjt);
        self.cov = cov;

        self.clones.insert(
            id,
            CloneState {
                stamp,
                pose,
                vel,
                imu_stamp,
            },
        );
        self.order.push(EntryKey::CloneTheta(id));
        self.order.push(EntryKey::ClonePos(id));
        self.offsets = build_offsets(&self.order);
        self.fej_register(EntryKey::CloneTheta(id));
        self.fej_register(EntryKey::ClonePos(id));
        self.symmetrize();
        Ok(id)
    }

    /// Appends a new 3-dim entry with an explicit covariance block and cross
    /// covariance (used by delayed feature initialization).
    pub fn append_feature(
        &mut self,
        id: FeatureId,
        pos: Vec3,
        cross: &DMatrix<f64>,
        block: &DMatrix<f64>,
    ) {
        assert_eq!(cross.nrows(), 3);
        assert_eq!(cross.ncols(), self.dim());
        assert_eq!((block.nrows(), block.ncols()), (3, 3));
        let dim = self.dim();
        let mut cov = DMatrix::zeros(dim + 3, dim + 3);
        cov.view_mut((0, 0), (dim, dim)).copy_from(&self.cov);
        cov.view_mut((dim, 0), (3, dim)).copy_from(cross);
        cov.view_mut((0, dim), (dim, 3)).copy_from(&cross.transpose());
        cov.view_mut((dim, dim), (3, 3)).copy_from(block);
        self.cov = cov;
        self.features.insert(id, SlamFeature { pos });
        self.order.push(EntryKey::Feature(id));
        self.offsets = build_offsets(&self.order);
        self.fej_register(EntryKey::Feature(id));
        self.symmetrize();
    }

    /// Removes entries (rows/columns of the covariance and their mean
    /// values); remaining blocks are untouched. Marginalizing part of a
    /// composite (e.g. only an IMU's bias) is allowed at this level; higher
    /// layers remove whole sensors.
    pub fn marginalize(&mut self, keys: &[EntryKey]) -> Result<(), StateError> {
        for key in keys {
            if !self.contains(*key) {
                return Err(StateError::UnknownEntry(*key));
            }
            if let EntryKey::ImuTheta(id) = key {
                if *id == self.base_imu {
                    return Err(StateError::BaseImuMarginalization(*id));
                }
            }
        }
        let drop: Vec<usize> = keys
            .iter()
            .flat_map(|k| {
                let off = self.offsets[k];
                (off..off + k.dim()).collect::<Vec<_>>()
            })
            .collect();
        let keep: Vec<usize> = (0..self.dim()).filter(|i| !drop.contains(i)).collect();
        let mut cov = DMatrix::zeros(keep.len(), keep.len());
        for (ri, &r) in keep.iter().enumerate() {
            for (ci, &c) in keep.iter().enumerate() {
                cov[(ri, ci)] = self.cov[(r, c)];
            }
        }
        self.cov = cov;
        self.order.retain(|k| !keys.contains(k));
        self.offsets = build_offsets(&self.order);
        for key in keys {
            self.fej.remove(key);
            match key {
                EntryKey::CloneTheta(c) => {
                    self.clones.remove(c);
                }
                EntryKey::Feature(f) => {
                    self.features.remove(f);
                }
                EntryKey::ImuTheta(i) => {
                    self.imus.remove(i);
                }
                EntryKey::CalImuTheta(i) => {
                    self.calib.imu.remove(i);
                }
                EntryKey::CalCamTheta(c) => {
                    self.calib.cam.remove(c);
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Rename an IMU's calibration entries in place (used when promoting a
    /// new base: the promoted IMU's extrinsic slots become the old base's).
    /// The caller is responsible for having already updated the calibration
    /// values; covariance offsets are untouched.
    pub(crate) fn relabel_imu_calib(&mut self, from: ImuId, to: ImuId) {
        let pairs = [
            (EntryKey::CalImuTheta(from), EntryKey::CalImuTheta(to)),
            (EntryKey::CalImuPos(from), EntryKey::CalImuPos(to)),
            (EntryKey::CalImuTime(from), EntryKey::CalImuTime(to)),
        ];
        for key in self.order.iter_mut() {
            for (old, new) in &pairs {
                if key == old {
                    *key = *new;
                }
            }
        }
        self.offsets = build_offsets(&self.order);
        for (old, new) in &pairs {
            self.fej.remove(old);
            self.fej.remove(new);
            self.fej_register(*new);
        }
    }

    /// All entry keys belonging to one IMU's navigation state.
    pub fn imu_entry_keys(&self, id: ImuId) -> Vec<EntryKey> {
        imu_entries(id)
    }

    pub fn imu_calib_entry_keys(&self, id: ImuId) -> Vec<EntryKey> {
        imu_calib_entries(id)
    }

    pub fn clone_entry_keys(&self, id: CloneId) -> Vec<EntryKey> {
        vec![EntryKey::CloneTheta(id), EntryKey::ClonePos(id)]
    }

    // ---- numerics ---------------------------------------------------------

    /// Scatter sparse blocks into a dense `rows x dim` matrix.
    pub fn assemble_blocks(
        &self,
        blocks: &JacobianBlocks,
        rows: usize,
    ) -> Result<DMatrix<f64>, StateError> {
        let mut j = DMatrix::zeros(rows, self.dim());
        for (key, block) in blocks {
            let off = self
                .offset_of(*key)
                .ok_or(StateError::UnknownEntry(*key))?;
            assert_eq!(block.nrows(), rows, "jacobian block row mismatch");
            assert_eq!(block.ncols(), key.dim(), "jacobian block col mismatch for {key:?}");
            let mut view = j.view_mut((0, off), (rows, key.dim()));
            view += block;
        }
        Ok(j)
    }

    pub fn symmetrize(&mut self) {
        let t = self.cov.transpose();
        self.cov = 0.5 * (&self.cov + t);
    }

    /// EKF measurement update with residual `r = z - h(x_hat)`, dense
    /// Jacobian `h` over the full error state, and diagonal measurement
    /// noise with standard deviation `sigma` per row. Joseph form keeps the
    /// covariance symmetric PSD.
    pub fn ekf_update(&mut self, h: &DMatrix<f64>, r: &DVector<f64>, sigma: &DVector<f64>) {
        let dim = self.dim();
        assert_eq!(h.ncols(), dim);
        assert_eq!(h.nrows(), r.len());
        assert_eq!(sigma.len(), r.len());
        let ph_t = &self.cov * h.transpose(); // dim x m
        let mut s = h * &ph_t; // m x m
        for i in 0..sigma.len() {
            s[(i, i)] += sigma[i] * sigma[i];
        }
        let s_inv = s
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .unwrap_or_else(|| {
                s.pseudo_inverse(1e-12)
                    .expect("innovation covariance not invertible")
            });
        let k = &ph_t * &s_inv; // dim x m
        let dx = &k * r;
        // Joseph form: (I - K H) P (I - K H)^T + K R K^T
        let ikh = DMatrix::identity(dim, dim) - &k * h;
        let mut krk = DMatrix::zeros(dim, dim);
        for i in 0..sigma.len() {
            let ki = k.column(i);
            krk += sigma[i] * sigma[i] * &ki * ki.transpose();
        }
        self.cov = &ikh * &self.cov * ikh.transpose() + krk;
        self.symmetrize();
        self.apply_correction(&dx);
    }

    /// Injects an error-state correction into the means.
    pub fn apply_correction(&mut self, dx: &DVector<f64>) {
        assert_eq!(dx.len(), self.dim());
        for key in self.order.clone() {
            let off = self.offsets[&key];
            match key {
                EntryKey::ImuTheta(i) => {
                    let d = Vec3::new(dx[off], dx[off + 1], dx[off + 2]);
                    let imu = self.imus.get_mut(&i).unwrap();
                    imu.rot = rot_correct(&imu.rot, &d);
                }
                EntryKey::ImuBg(i) => self.imus.get_mut(&i).unwrap().bg += dvec3(dx, off),
                EntryKey::ImuVel(i) => self.imus.get_mut(&i).unwrap().vel += dvec3(dx, off),
                EntryKey::ImuBa(i) => self.imus.get_mut(&i).unwrap().ba += dvec3(dx, off),
                EntryKey::ImuPos(i) => self.imus.get_mut(&i).unwrap().pos += dvec3(dx, off),
                EntryKey::CloneTheta(c) => {
                    let d = Vec3::new(dx[off], dx[off + 1], dx[off + 2]);
                    let cl = self.clones.get_mut(&c).unwrap();
                    cl.pose.rot = rot_correct(&cl.pose.rot, &d);
                }
                EntryKey::ClonePos(c) => self.clones.get_mut(&c).unwrap().pose.pos += dvec3(dx, off),
                EntryKey::CalImuTheta(i) => {
                    let d = Vec3::new(dx[off], dx[off + 1], dx[off + 2]);
                    let cal = self.calib.imu.get_mut(&i).unwrap();
                    cal.rot = rot_correct(&cal.rot, &d);
                }
                EntryKey::CalImuPos(i) => self.calib.imu.get_mut(&i).unwrap().pos += dvec3(dx, off),
                EntryKey::CalImuTime(i) => {
                    self.calib.imu.get_mut(&i).unwrap().time_offset += dx[off]
                }
                EntryKey::CalCamTheta(c) => {
                    let d = Vec3::new(dx[off], dx[off + 1], dx[off + 2]);
                    let cal = self.calib.cam.get_mut(&c).unwrap();
                    cal.rot = rot_correct(&cal.rot, &d);
                }
                EntryKey::CalCamPos(c) => self.calib.cam.get_mut(&c).unwrap().pos += dvec3(dx, off),
                EntryKey::CalCamTime(c) => {
                    self.calib.cam.get_mut(&c).unwrap().time_offset += dx[off]
                }
                EntryKey::CalCamProj(c) => {
                    let intr = &mut self.calib.cam.get_mut(&c).unwrap().intr;
                    intr.fx += dx[off];
                    intr.fy += dx[off + 1];
                    intr.px += dx[off + 2];
                    intr.py += dx[off + 3];
                }
                EntryKey::CalCamDist(c) => {
                    let intr = &mut self.calib.cam.get_mut(&c).unwrap().intr;
                    for i in 0..4 {
                        intr.dist[i] += dx[off + i];
                    }
                }
                EntryKey::CalCamReadout(c) => {
                    self.calib.cam.get_mut(&c).unwrap().intr.readout += dx[off]
                }
                EntryKey::Feature(f) => self.features.get_mut(&f).unwrap().pos += dvec3(dx, off),
            }
        }
    }

    /// Marginal standard deviations (sqrt of the covariance diagonal).
    pub fn sigma_diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()))
    }
}

fn dvec3(dx: &DVector<f64>, off: usize) -> Vec3 {
    Vec3::new(dx[off], dx[off + 1], dx[off + 2])
}

/// Error injection for rotations: `R <- Exp(-dtheta) R_hat` per the
/// multiplicative error convention.
pub fn rot_correct(rot: &Rotation, dtheta: &Vec3) -> Rotation {
    Rotation::exp(&-dtheta).compose(rot)
}

fn imu_entries(id: ImuId) -> Vec<EntryKey> {
    vec![
        EntryKey::ImuTheta(id),
        EntryKey::ImuBg(id),
        EntryKey::ImuVel(id),
        EntryKey::ImuBa(id),
        EntryKey::ImuPos(id),
    ]
}

fn imu_calib_entries(id: ImuId) -> Vec<EntryKey> {
    vec![
        EntryKey::CalImuTheta(id),
        EntryKey::CalImuPos(id),
        EntryKey::CalImuTime(id),
    ]
}

fn cam_calib_entries(id: CamId) -> Vec<EntryKey> {
    vec![
        EntryKey::CalCamTheta(id),
        EntryKey::CalCamPos(id),
        EntryKey::CalCamTime(id),
        EntryKey::CalCamProj(id),
        EntryKey::CalCamDist(id),
        EntryKey::CalCamReadout(id),
    ]
}

fn build_offsets(order: &[EntryKey]) -> HashMap<EntryKey, usize> {
    let mut map = HashMap::with_capacity(order.len());
    let mut off = 0;
    for key in order {
        map.insert(*key, off);
        off += key.dim();
    }
    map
}
