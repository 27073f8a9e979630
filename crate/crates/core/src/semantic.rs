//! Class-id remapping, semantic prior encoding and prediction sources.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;

use crate::formats::{self, FormatError, LabelRecord};
use crate::geometry::Aggregated4DCloud;
use crate::proposal::OffsetField;

/// Dense class index in `[0, C)`.
pub type TrainId = u8;

/// Marker for points that carry no usable class.
pub const IGNORE: TrainId = TrainId::MAX;

const DEFAULT_MAP: &str = include_str!("../data/semantic-kitti.map");

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PriorError {
    #[error("class id {id} out of range for {num_classes} classes (point {index})")]
    IdOutOfRange {
        index: usize,
        id: TrainId,
        num_classes: usize,
    },
    #[error("confidence row {row} has no positive entry")]
    AllZeroRow { row: usize },
    #[error("confidence row {row} has a negative or non-finite entry")]
    InvalidRow { row: usize },
    #[error("row data length {len} is not a multiple of {num_classes}")]
    Ragged { len: usize, num_classes: usize },
    #[error("no labeled members after removing ignored points")]
    EmptyAfterFilter,
}

#[derive(Debug, thiserror::Error)]
pub enum ClassMapError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Raw SemanticKITTI id <-> dense train id table plus the thing/stuff split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    raw_to_train: BTreeMap<u16, TrainId>,
    train_to_raw: Vec<u16>,
    names: Vec<String>,
    thing_mask: Vec<bool>,
}

impl Default for ClassMap {
    fn default() -> Self {
        Self::semantic_kitti()
    }
}

impl ClassMap {
    /// The 19-class map shipped with the crate (moving classes folded into static ones).
    pub fn semantic_kitti() -> Self {
        Self::parse("<builtin semantic-kitti.map>", DEFAULT_MAP).expect("builtin class map is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassMapError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ClassMapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn parse(origin: &str, text: &str) -> Result<Self, ClassMapError> {
        let perr = |line: usize, reason: String| ClassMapError::Parse {
            path: origin.to_string(),
            line,
            reason,
        };
        let mut names: Vec<String> = Vec::new();
        let mut canonical: Vec<u16> = Vec::new();
        let mut things: Vec<String> = Vec::new();
        let mut pairs: Vec<(usize, u16, Option<u32>)> = Vec::new();

        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once(':') else {
                return Err(perr(line_no, format!("expected `key: value`, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "names" => names = value.split_whitespace().map(str::to_string).collect(),
                "things" => things = value.split_whitespace().map(str::to_string).collect(),
                "canonical" => {
                    canonical = value
                        .split_whitespace()
                        .map(|t| t.parse::<u16>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| perr(line_no, format!("canonical: {e}")))?;
                }
                _ => {
                    let raw = key
                        .parse::<u16>()
                        .map_err(|_| perr(line_no, format!("unknown key {key:?}")))?;
                    let train = if value == "ignore" {
                        None
                    } else {
                        Some(
                            value
                                .parse::<u32>()
                                .map_err(|_| perr(line_no, format!("bad train id {value:?}")))?,
                        )
                    };
                    pairs.push((line_no, raw, train));
                }
            }
        }

        let invalid = |reason: String| ClassMapError::Invalid {
            path: origin.to_string(),
            reason,
        };
        let c = names.len();
        if c == 0 || c >= usize::from(IGNORE) {
            return Err(invalid(format!("`names:` must list 1..{} classes", IGNORE)));
        }
        if canonical.len() != c {
            return Err(invalid(format!(
                "`canonical:` lists {} ids for {c} classes",
                canonical.len()
            )));
        }
        let mut raw_to_train = BTreeMap::new();
        for (line, raw, train) in pairs {
            let id = match train {
                None => IGNORE,
                Some(t) if (t as usize) < c => t as TrainId,
                Some(t) => return Err(perr(line, format!("train id {t} >= {c}"))),
            };
            if raw_to_train.insert(raw, id).is_some() {
                return Err(perr(line, format!("raw id {raw} mapped twice")));
            }
        }
        for (t, raw) in canonical.iter().enumerate() {
            if raw_to_train.get(raw) != Some(&(t as TrainId)) {
                return Err(invalid(format!(
                    "canonical raw id {raw} does not map back to train id {t}"
                )));
            }
        }
        let mut thing_mask = vec![false; c];
        for t in &things {
            let idx = names
                .iter()
                .position(|n| n == t)
                .or_else(|| t.parse::<usize>().ok().filter(|&i| i < c))
                .ok_or_else(|| invalid(format!("unknown thing class {t:?}")))?;
            thing_mask[idx] = true;
        }
        Ok(Self {
            raw_to_train,
            train_to_raw: canonical,
            names,
            thing_mask,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: TrainId) -> &str {
        self.names.get(id as usize).map_or("ignore", String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_thing(&self, id: TrainId) -> bool {
        self.thing_mask.get(id as usize).copied().unwrap_or(false)
    }

    pub fn thing_mask(&self) -> &[bool] {
        &self.thing_mask
    }

    pub fn to_train(&self, raw: u16) -> Option<TrainId> {
        self.raw_to_train.get(&raw).copied()
    }

    /// Canonical raw id for a train id; `IGNORE` maps to raw 0 (unlabeled).
    pub fn to_raw(&self, id: TrainId) -> u16 {
        self.train_to_raw.get(id as usize).copied().unwrap_or(0)
    }
}

/// Train ids for a scan plus the number of raw ids the map did not know.
#[derive(Debug, Clone, PartialEq)]
pub struct Remapped {
    pub ids: Vec<TrainId>,
    pub unknown: usize,
}

pub fn remap(labels: &[LabelRecord], map: &ClassMap) -> Remapped {
    let mut unknown = 0;
    let ids = labels
        .iter()
        .map(|l| {
            map.to_train(l.semantic_raw).unwrap_or_else(|| {
                unknown += 1;
                IGNORE
            })
        })
        .collect();
    if unknown > 0 {
        warn!("{unknown} labels carry raw ids missing from the class map; treated as ignore");
    }
    Remapped { ids, unknown }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    OneHot,
    Confidence,
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::OneHot => "one_hot",
            PriorKind::Confidence => "confidence",
        })
    }
}

impl std::str::FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one_hot" | "one-hot" | "onehot" => Ok(PriorKind::OneHot),
            "confidence" | "confidences" => Ok(PriorKind::Confidence),
            other => Err(format!("unknown prior kind {other:?}")),
        }
    }
}

/// Per-point class distribution, stored row-major (`len x num_classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPrior {
    kind: PriorKind,
    num_classes: usize,
    rows: Vec<f64>,
}

impl SemanticPrior {
    pub(crate) fn from_rows_unchecked(kind: PriorKind, num_classes: usize, rows: Vec<f64>) -> Self {
        debug_assert_eq!(rows.len() % num_classes.max(1), 0);
        Self {
            kind,
            num_classes,
            rows,
        }
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.num_classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    pub fn argmax_labels(&self) -> Vec<TrainId> {
        self.rows().map(argmax_label).collect()
    }
}

/// Unit rows at each id; `IGNORE` rows become the uniform distribution.
pub fn encode_one_hot(ids: &[TrainId], num_classes: usize) -> Result<SemanticPrior, PriorError> {
    let mut rows = vec![0.0; ids.len() * num_classes];
    let uniform = 1.0 / num_classes as f64;
    for (i, (&id, row)) in ids.iter().zip(rows.chunks_exact_mut(num_classes)).enumerate() {
        if id == IGNORE {
            row.fill(uniform);
        } else if (id as usize) < num_classes {
            row[id as usize] = 1.0;
        } else {
            return Err(PriorError::IdOutOfRange {
                index: i,
                id,
                num_classes,
            });
        }
    }
    Ok(SemanticPrior::from_rows_unchecked(PriorKind::OneHot, num_classes, rows))
}

/// Divides each nonnegative score row by its sum.
pub fn normalize_confidences(raw: &[f64], num_classes: usize) -> Result<SemanticPrior, PriorError> {
    if num_classes == 0 || raw.len() % num_classes != 0 {
        return Err(PriorError::Ragged {
            len: raw.len(),
            num_classes,
        });
    }
    let mut rows = raw.to_vec();
    for (i, row) in rows.chunks_exact_mut(num_classes).enumerate() {
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PriorError::InvalidRow { row: i });
        }
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(PriorError::AllZeroRow { row: i });
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(SemanticPrior::from_rows_unchecked(PriorKind::Confidence, num_classes, rows))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_label(row: &[f64]) -> TrainId {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as TrainId
}

/// Modal id among non-ignored members; ties go to the lowest id.
pub fn majority_label(members: impl IntoIterator<Item = TrainId>) -> Result<TrainId, PriorError> {
    let mut counts = [0usize; 256];
    for id in members {
        if id != IGNORE {
            counts[id as usize] += 1;
        }
    }
    let (best, &n) = counts
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|(_, c)| **c)
        .expect("non-empty histogram");
    if n == 0 {
        return Err(PriorError::EmptyAfterFilter);
    }
    Ok(best as TrainId)
}

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("scan {scan}: {source}")]
    File {
        scan: usize,
        #[source]
        source: FormatError,
    },
    #[error("scan {scan}: {source}")]
    Prior {
        scan: usize,
        #[source]
        source: PriorError,
    },
    #[error("scan {scan}: prediction source has no data")]
    Missing { scan: usize },
}

/// Supplies the outputs of the external predictors: a semantic prior per scan
/// and a center-offset field per aggregated window.
pub trait PredictionSource: Send + Sync {
    fn semantic_prior(&self, scan_index: usize, n_points: usize) -> Result<SemanticPrior, SourceError>;

    fn offsets(&self, cloud: &Aggregated4DCloud) -> Result<OffsetField, SourceError>;
}

/// Where a [`FileProvider`] reads its semantic prior from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticFiles {
    /// `semantic/NNNNNN.label`, semantic field only.
    Labels,
    /// `confidences/NNNNNN.bin`, N x C little-endian f32.
    Confidences,
}

/// Reads predictor outputs from per-scan files under one directory:
///
/// ```text
/// <root>/semantic/NNNNNN.label
/// <root>/confidences/NNNNNN.bin
/// <root>/offsets/NNNNNN.bin      N x 3 f32, offset in the scan's sensor frame
/// ```
#[derive(Debug, Clone)]
pub struct FileProvider {
    pub root: PathBuf,
    pub semantic: SemanticFiles,
    pub class_map: ClassMap,
}

impl FileProvider {
    pub fn new(root: impl Into<PathBuf>, semantic: SemanticFiles, class_map: ClassMap) -> Self {
        Self {
            root: root.into(),
            semantic,
            class_map,
        }
    }

    pub fn offsets_path(&self, scan: usize) -> PathBuf {
        self.root.join("offsets").join(formats::scan_file_name(scan, "bin"))
    }

    pub fn semantic_path(&self, scan: usize) -> PathBuf {
        match self.semantic {
            SemanticFiles::Labels => self
                .root
                .join("semantic")
                .join(formats::scan_file_name(scan, "label")),
            SemanticFiles::Confidences => self
                .root
                .join("confidences")
                .join(formats::scan_file_name(scan, "bin")),
        }
    }
}

impl PredictionSource for FileProvider {
    fn semantic_prior(&self, scan: usize, n_points: usize) -> Result<SemanticPrior, SourceError> {
        let c = self.class_map.num_classes();
        let path = self.semantic_path(scan);
        match self.semantic {
            SemanticFiles::Labels => {
                let labels = formats::read_labels(&path, n_points)
                    .map_err(|source| SourceError::File { scan, source })?;
                let ids = remap(&labels, &self.class_map).ids;
                encode_one_hot(&ids, c).map_err(|source| SourceError::Prior { scan, source })
            }
            SemanticFiles::Confidences => {
                let values = formats::read_f32_rows(&path, c, n_points)
                    .map_err(|source| SourceError::File { scan, source })?;
                let raw: Vec<f64> = values.into_iter().map(f64::from).collect();
                normalize_confidences(&raw, c).map_err(|source| SourceError::Prior { scan, source })
            }
        }
    }

    fn offsets(&self, cloud: &Aggregated4DCloud) -> Result<OffsetField, SourceError> {
        let mut offsets = Vec::with_capacity(cloud.len());
        for k in 0..cloud.n_scans {
            let scan = cloud.window.start + k;
            let n = cloud.scan_range(k).len();
            let path = self.offsets_path(scan);
            let values = formats::read_f32_rows(&path, 3, n)
                .map_err(|source| SourceError::File { scan, source })?;
            let to_ref = &cloud.scan_transforms[k];
            offsets.extend(values.chunks_exact(3).map(|v| {
                to_ref.rotate([f64::from(v[0]), f64::from(v[1]), f64::from(v[2])])
            }));
        }
        Ok(OffsetField { offsets })
    }
}
