//! Readers and writers for the SemanticKITTI on-disk layout.
//!
//! ```text
//! <seq>/velodyne/NNNNNN.bin   N x (x:f32, y:f32, z:f32, remission:f32), little-endian
//! <seq>/labels/NNNNNN.label   N x u32 LE, low 16 bits semantic, high 16 bits instance
//! <seq>/poses.txt             one row-major 3x4 camera-frame pose per line
//! <seq>/calib.txt             "Tr:" line holds the lidar -> camera transform
//! ```
//!
//! Prediction files use the label layout. Offset and confidence files written
//! for the file-backed prediction source are plain little-endian f32 rows.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

/// Orthonormality tolerance applied when parsing poses and calibration.
pub const POSE_ORTHONORMAL_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: length {len} is not a multiple of {stride} bytes")]
    FileTooShort {
        path: PathBuf,
        len: u64,
        stride: usize,
    },
    #[error("{path}: point {index} has a non-finite value")]
    NonFiniteValue { path: PathBuf, index: usize },
    #[error("{path}: expected {expected} records, file holds {found} bytes")]
    CountMismatch {
        path: PathBuf,
        expected: usize,
        found: u64,
    },
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: no \"Tr:\" line")]
    MissingTrLine { path: PathBuf },
    #[error("{path}:{line}: rotation is not orthonormal (max deviation {deviation:.3e})")]
    NonOrthonormalRotation {
        path: PathBuf,
        line: usize,
        deviation: f64,
    },
    #[error("record {index}: id {value} does not fit in 16 bits")]
    IdOverflow { index: usize, value: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One LiDAR sweep in its sensor frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloudScan {
    pub points: Vec<[f32; 3]>,
    pub feature: Vec<f32>,
    pub scan_index: usize,
}

impl PointCloudScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A single packed SemanticKITTI label word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelRecord {
    pub semantic_raw: u16,
    pub instance_id: u16,
}

impl LabelRecord {
    pub fn new(semantic_raw: u16, instance_id: u16) -> Self {
        Self {
            semantic_raw,
            instance_id,
        }
    }

    pub fn pack(self) -> u32 {
        (u32::from(self.instance_id) << 16) | u32::from(self.semantic_raw)
    }

    pub fn unpack(word: u32) -> Self {
        Self {
            semantic_raw: (word & 0xFFFF) as u16,
            instance_id: (word >> 16) as u16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Camera,
    Lidar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub frame: Frame,
}

/// Lidar-to-camera extrinsics from `calib.txt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibRecord {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CalibRecord {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }
}

/// Largest elementwise deviation of `RᵀR` from identity, folded together with `|det R - 1|`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let det = (r.determinant() - 1.0).abs();
    gram.iter().fold(det, |acc, v| acc.max(v.abs()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn f32_rows(path: &Path, bytes: &[u8], width: usize) -> Result<Vec<f32>, FormatError> {
    let stride = width * 4;
    if bytes.len() % stride != 0 {
        return Err(FormatError::FileTooShort {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            stride,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFiniteValue {
            path: path.to_path_buf(),
            index: pos / width,
        });
    }
    Ok(values)
}

/// Decodes a velodyne `.bin` file.
pub fn read_scan(path: impl AsRef<Path>, scan_index: usize) -> Result<PointCloudScan, FormatError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode_scan(path, &bytes, scan_index)
}

pub fn decode_scan(
    path: &Path,
    bytes: &[u8],
    scan_index: usize,
) -> Result<PointCloudScan, FormatError> {
    let values = f32_rows(path, bytes, 4)?;
    let mut points = Vec::with_capacity(values.len() / 4);
    let mut feature = Vec::with_capacity(values.len() / 4);
    for q in values.chunks_exact(4) {
        points.push([q[0], q[1], q[2]]);
        feature.push(q[3]);
    }
    Ok(PointCloudScan {
        points,
        feature,
        scan_index,
    })
}

pub fn encode_scan(scan: &PointCloudScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * 16);
    for (p, f) in scan.points.iter().zip(&scan.feature) {
        for v in [p[0], p[1], p[2], *f] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_scan(path: impl AsRef<Path>, scan: &PointCloudScan) -> Result<(), FormatError> {
    write_bytes(path.as_ref(), &encode_scan(scan))
}

/// Decodes a `.label` file, checking it holds exactly `expected_count` words.
pub fn read_labels(
    path: impl AsRef<Path>,
    expected_count: usize,
) -> Result<Vec<LabelRecord>, FormatError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() != expected_count * 4 {
        return Err(FormatError::CountMismatch {
            path: path.to_path_buf(),
            expected: expected_count,
            found: bytes.len() as u64,
        });
    }
    Ok(decode_labels(&bytes))
}

/// Decodes a `.label` file of whatever length it has (must be a multiple of 4).
pub fn read_labels_any(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>, FormatError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(FormatError::FileTooShort {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            stride: 4,
        });
    }
    Ok(decode_labels(&bytes))
}

fn decode_labels(bytes: &[u8]) -> Vec<LabelRecord> {
    bytes
        .chunks_exact(4)
        .map(|c| LabelRecord::unpack(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

/// Packs `(semantic_raw, instance_id)` pairs into label words.
pub fn encode_predictions(labels: &[(u32, u32)]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for (index, &(sem, inst)) in labels.iter().enumerate() {
        for value in [sem, inst] {
            if value > u32::from(u16::MAX) {
                return Err(FormatError::IdOverflow { index, value });
            }
        }
        out.extend_from_slice(&LabelRecord::new(sem as u16, inst as u16).pack().to_le_bytes());
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, labels: &[(u32, u32)]) -> Result<(), FormatError> {
    let bytes = encode_predictions(labels)?;
    write_bytes(path.as_ref(), &bytes)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[LabelRecord]) -> Result<(), FormatError> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.pack().to_le_bytes()).collect();
    write_bytes(path.as_ref(), &bytes)
}

fn parse_row_major_3x4(
    path: &Path,
    line_no: usize,
    tokens: &[&str],
) -> Result<(Matrix3<f64>, Vector3<f64>), FormatError> {
    if tokens.len() != 12 {
        return Err(FormatError::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("expected 12 numbers, found {}", tokens.len()),
        });
    }
    let mut v = [0.0f64; 12];
    for (slot, tok) in v.iter_mut().zip(tokens) {
        // Rust's float parser is locale-independent: only '.' is a decimal separator.
        *slot = tok.parse::<f64>().map_err(|_| FormatError::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("cannot parse {tok:?} as a number"),
        })?;
        if !slot.is_finite() {
            return Err(FormatError::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("non-finite value {tok:?}"),
            });
        }
    }
    let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let translation = Vector3::new(v[3], v[7], v[11]);
    Ok((rotation, translation))
}

fn check_rotation(path: &Path, line: usize, r: &Matrix3<f64>) -> Result<(), FormatError> {
    let deviation = orthonormality_error(r);
    if deviation > POSE_ORTHONORMAL_TOL {
        return Err(FormatError::NonOrthonormalRotation {
            path: path.to_path_buf(),
            line,
            deviation,
        });
    }
    Ok(())
}

/// Parses `poses.txt` contents. Rotations off by more than
/// [`POSE_ORTHONORMAL_TOL`] are reported as errors.
pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<PoseRecord>, FormatError> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let (rotation, translation) = parse_row_major_3x4(path, i + 1, &tokens)?;
        check_rotation(path, i + 1, &rotation)?;
        poses.push(PoseRecord {
            rotation,
            translation,
            frame: Frame::Camera,
        });
    }
    Ok(poses)
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>, FormatError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_poses(path, &text)
}

fn format_3x4(r: &Matrix3<f64>, t: &Vector3<f64>) -> String {
    let mut parts = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            parts.push(format!("{:e}", r[(row, col)]));
        }
        parts.push(format!("{:e}", t[row]));
    }
    parts.join(" ")
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[PoseRecord]) -> Result<(), FormatError> {
    let path = path.as_ref();
    let mut text = String::new();
    for p in poses {
        text.push_str(&format_3x4(&p.rotation, &p.translation));
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

pub fn parse_calib(path: &Path, text: &str) -> Result<CalibRecord, FormatError> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim_start().strip_prefix("Tr:") else {
            continue;
        };
        let tokens: Vec<&str> = rest.split_whitespace().collect();
        let (rotation, translation) = parse_row_major_3x4(path, i + 1, &tokens)?;
        check_rotation(path, i + 1, &rotation)?;
        return Ok(CalibRecord {
            rotation,
            translation,
        });
    }
    Err(FormatError::MissingTrLine {
        path: path.to_path_buf(),
    })
}

pub fn read_calib(path: impl AsRef<Path>) -> Result<CalibRecord, FormatError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_calib(path, &text)
}

pub fn write_calib(path: impl AsRef<Path>, calib: &CalibRecord) -> Result<(), FormatError> {
    let text = format!("Tr: {}\n", format_3x4(&calib.rotation, &calib.translation));
    write_bytes(path.as_ref(), text.as_bytes())
}

/// Reads an N x `width` little-endian f32 matrix, checking the row count.
pub fn read_f32_rows(
    path: impl AsRef<Path>,
    width: usize,
    expected_rows: usize,
) -> Result<Vec<f32>, FormatError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() != expected_rows * width * 4 {
        return Err(FormatError::CountMismatch {
            path: path.to_path_buf(),
            expected: expected_rows,
            found: bytes.len() as u64,
        });
    }
    f32_rows(path, &bytes, width)
}

pub fn write_f32_rows(path: impl AsRef<Path>, values: &[f32]) -> Result<(), FormatError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `NNNNNN` file stem used for per-scan files.
pub fn scan_file_name(scan_index: usize, extension: &str) -> String {
    format!("{scan_index:06}.{extension}")
}

/// Per-sequence paths following the SemanticKITTI directory convention.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub root: PathBuf,
}

impl SequenceLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scan(&self, index: usize) -> PathBuf {
        self.root.join("velodyne").join(scan_file_name(index, "bin"))
    }

    pub fn label(&self, index: usize) -> PathBuf {
        self.root.join("labels").join(scan_file_name(index, "label"))
    }

    pub fn prediction(&self, index: usize) -> PathBuf {
        self.root
            .join("predictions")
            .join(scan_file_name(index, "label"))
    }

    pub fn poses(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    pub fn calib(&self) -> PathBuf {
        self.root.join("calib.txt")
    }

    /// Number of consecutive `velodyne/NNNNNN.bin` files starting at zero.
    pub fn count_scans(&self) -> usize {
        (0..).take_while(|&i| self.scan(i).is_file()).count()
    }

    /// Number of consecutive `labels/NNNNNN.label` files starting at zero.
    pub fn count_scans_with_labels(&self) -> usize {
        (0..).take_while(|&i| self.label(i).is_file()).count()
    }
}
