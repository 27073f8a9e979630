//! Rigid transforms and multi-scan aggregation into a 4D cloud.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::formats::{CalibRecord, Frame, PointCloudScan, PoseRecord};
use crate::semantic::SemanticPrior;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AggregateError {
    #[error("window start {start} + length {len} exceeds {available} scans")]
    WindowOutOfRange {
        start: usize,
        len: usize,
        available: usize,
    },
    #[error("scan {scan_index}: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        scan_index: usize,
        what: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("pose for scan {scan_index} is not a camera-frame pose")]
    WrongPoseFrame { scan_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Matrix3::identity(), Vector3::new(x, y, z))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_array(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.apply(&Vector3::new(p[0], p[1], p[2]));
        [q.x, q.y, q.z]
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(v[0], v[1], v[2]);
        [q.x, q.y, q.z]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .iter()
            .chain((self.translation - other.translation).iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

impl From<&CalibRecord> for RigidTransform {
    fn from(c: &CalibRecord) -> Self {
        RigidTransform::new(c.rotation, c.translation)
    }
}

/// `Tr⁻¹ · T_cam · Tr`: the scan's sensor-to-world map in the lidar frame.
pub fn lidar_pose_from_camera_pose(pose: &PoseRecord, calib: &CalibRecord) -> RigidTransform {
    debug_assert_eq!(pose.frame, Frame::Camera);
    let tr = RigidTransform::from(calib);
    let cam = RigidTransform::new(pose.rotation, pose.translation);
    tr.inverse().compose(&cam).compose(&tr)
}

/// Inverse of [`lidar_pose_from_camera_pose`], used when writing `poses.txt`.
pub fn camera_pose_from_lidar_pose(lidar: &RigidTransform, calib: &CalibRecord) -> PoseRecord {
    let tr = RigidTransform::from(calib);
    let cam = tr.compose(lidar).compose(&tr.inverse());
    PoseRecord {
        rotation: cam.rotation,
        translation: cam.translation,
        frame: Frame::Camera,
    }
}

pub fn transform_points(points: &[[f64; 3]], t: &RigidTransform) -> Vec<[f64; 3]> {
    points.iter().map(|p| t.apply_array(*p)).collect()
}

/// A contiguous range of scans processed together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, scan: usize) -> bool {
        scan >= self.start && scan < self.end()
    }
}

/// Windows of `size` scans advancing by `stride` until the last scan is covered.
/// The final window is truncated at the end of the sequence.
pub fn plan_windows(n_scans: usize, size: usize, stride: usize) -> Vec<Window> {
    assert!(size >= 1 && stride >= 1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_scans {
        let len = size.min(n_scans - start);
        out.push(Window::new(start, len));
        if start + len >= n_scans {
            break;
        }
        start += stride;
    }
    out
}

/// Back-reference from an aggregated point to its source scan and point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Origin {
    pub scan_index: u32,
    pub point_index: u32,
}

/// Points of several scans fused into the frame of the window's first scan.
#[derive(Debug, Clone)]
pub struct Aggregated4DCloud {
    pub positions: Vec<[f64; 3]>,
    pub feature: Vec<f32>,
    pub prior: SemanticPrior,
    pub time_index: Vec<u32>,
    pub origin: Vec<Origin>,
    pub n_scans: usize,
    /// Window in scan-index space (`scan_index` of the first scan, count).
    pub window: Window,
    /// Sensor frame of each scan -> window reference frame.
    pub scan_transforms: Vec<RigidTransform>,
    /// Start offset of each scan's points; one trailing entry holds the total.
    pub scan_offsets: Vec<usize>,
}

impl Aggregated4DCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Index into this cloud of the given source point, if the scan is in the window.
    pub fn index_of(&self, origin: Origin) -> Option<usize> {
        let scan = origin.scan_index as usize;
        if !self.window.contains(scan) {
            return None;
        }
        let k = scan - self.window.start;
        let idx = self.scan_offsets[k] + origin.point_index as usize;
        (idx < self.scan_offsets[k + 1]).then_some(idx)
    }

    pub fn scan_range(&self, offset_in_window: usize) -> std::ops::Range<usize> {
        self.scan_offsets[offset_in_window]..self.scan_offsets[offset_in_window + 1]
    }
}

/// Fuses `scans[window.start .. window.end())` into the frame of `scans[window.start]`.
///
/// `scans`, `lidar_poses` and `priors` are aligned by position. Prior rows are
/// copied through unchanged.
pub fn aggregate(
    scans: &[PointCloudScan],
    lidar_poses: &[RigidTransform],
    priors: &[SemanticPrior],
    window: Window,
) -> Result<Aggregated4DCloud, AggregateError> {
    let available = scans.len().min(lidar_poses.len()).min(priors.len());
    if window.len == 0 || window.end() > available {
        return Err(AggregateError::WindowOutOfRange {
            start: window.start,
            len: window.len,
            available,
        });
    }
    let parts = window.start..window.end();
    let num_classes = priors[window.start].num_classes();
    let kind = priors[window.start].kind();

    let mut total = 0;
    for i in parts.clone() {
        let (scan, prior) = (&scans[i], &priors[i]);
        if scan.feature.len() != scan.points.len() {
            return Err(AggregateError::LengthMismatch {
                scan_index: scan.scan_index,
                what: "feature",
                found: scan.feature.len(),
                expected: scan.points.len(),
            });
        }
        if prior.len() != scan.points.len() {
            return Err(AggregateError::LengthMismatch {
                scan_index: scan.scan_index,
                what: "prior",
                found: prior.len(),
                expected: scan.points.len(),
            });
        }
        if prior.num_classes() != num_classes {
            return Err(AggregateError::LengthMismatch {
                scan_index: scan.scan_index,
                what: "prior row width",
                found: prior.num_classes(),
                expected: num_classes,
            });
        }
        total += scan.len();
    }

    let reference_inv = lidar_poses[window.start].inverse();
    let mut positions = Vec::with_capacity(total);
    let mut feature = Vec::with_capacity(total);
    let mut prior_rows = Vec::with_capacity(total * num_classes);
    let mut time_index = Vec::with_capacity(total);
    let mut origin = Vec::with_capacity(total);
    let mut scan_transforms = Vec::with_capacity(window.len);
    let mut scan_offsets = Vec::with_capacity(window.len + 1);

    for (offset, i) in parts.enumerate() {
        let scan = &scans[i];
        let to_ref = reference_inv.compose(&lidar_poses[i]);
        scan_offsets.push(positions.len());
        for (pi, p) in scan.points.iter().enumerate() {
            let v = Vector3::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
            let q = to_ref.apply(&v);
            positions.push([q.x, q.y, q.z]);
            time_index.push(offset as u32);
            origin.push(Origin {
                scan_index: scan.scan_index as u32,
                point_index: pi as u32,
            });
        }
        feature.extend_from_slice(&scan.feature);
        prior_rows.extend_from_slice(priors[i].as_slice());
        scan_transforms.push(to_ref);
    }
    scan_offsets.push(positions.len());

    Ok(Aggregated4DCloud {
        positions,
        feature,
        prior: SemanticPrior::from_rows_unchecked(kind, num_classes, prior_rows),
        time_index,
        origin,
        n_scans: window.len,
        window: Window::new(scans[window.start].scan_index, window.len),
        scan_transforms,
        scan_offsets,
    })
}
