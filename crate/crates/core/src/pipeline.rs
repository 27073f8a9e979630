//! Workflows behind the command-line tool: dataset synthesis, windowed
//! segmentation with stitching, evaluation and ablation sweeps.
//!
//! Datasets follow the SemanticKITTI layout:
//!
//! ```text
//! <root>/sequences/<seq>/velodyne/NNNNNN.bin
//! <root>/sequences/<seq>/labels/NNNNNN.label
//! <root>/sequences/<seq>/poses.txt
//! <root>/sequences/<seq>/calib.txt
//! ```
//!
//! Predictions are written to `<output>/sequences/<seq>/predictions/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;

use crate::config::{ConfigError, KeyValues};
use crate::formats::{self, FormatError, PointCloudScan, SequenceLayout};
use crate::geometry::{aggregate, lidar_pose_from_camera_pose, plan_windows, AggregateError, RigidTransform, Window};
use crate::lstq::{lstq, EvalError, LstqAccumulator, LstqReport, ScanLabels};
use crate::proposal::{segment_window, GroupSpace, InstanceSegmentation, ProposalError, ProposalParams, SeedFilter, WindowStats};
use crate::semantic::{remap, ClassMap, ClassMapError, FileProvider, PredictionSource, PriorKind, SemanticFiles, SourceError, TrainId};
use crate::synth::{self, GroundTruth, OracleProvider, SceneConfig, SynthError};
use crate::tracker::{overlap_origins, stitch, StitchReport, TrackError, TrackState};

/// Environment variable naming the default dataset root.
pub const DATASET_ROOT_ENV: &str = "DPLS_DATASET_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    ClassMap(#[from] ClassMapError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("window of scans {start}..{end}: {source}")]
    Source {
        start: usize,
        end: usize,
        #[source]
        source: SourceError,
    },
    #[error("window of scans {start}..{end}: {source}")]
    Aggregate {
        start: usize,
        end: usize,
        #[source]
        source: AggregateError,
    },
    #[error("window of scans {start}..{end}: {source}")]
    Proposal {
        start: usize,
        end: usize,
        #[source]
        source: ProposalError,
    },
    #[error("sequence {sequence}: {reason}")]
    Dataset { sequence: String, reason: String },
    #[error("cannot create thread pool: {0}")]
    ThreadPool(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where priors and offsets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceConfig {
    /// Per-scan files under `<root>/sequences/<seq>/` (see [`FileProvider`]).
    /// `None` means the dataset root.
    Files { root: Option<PathBuf> },
    /// Ground-truth labels with corruption.
    Oracle { flip_prob: f64, offset_sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub dataset_root: Option<PathBuf>,
    pub sequences: Vec<String>,
    pub window: usize,
    pub stride: usize,
    pub prior_kind: PriorKind,
    pub source: SourceConfig,
    pub proposal: ProposalParams,
    pub output: PathBuf,
    pub threads: usize,
    pub seed: u64,
    pub class_map: Option<PathBuf>,
    /// Label flip probabilities swept by the ablation.
    pub ablate_rho: Vec<f64>,
    /// Prior kinds swept by the ablation.
    pub ablate_priors: Vec<PriorKind>,
    /// Offset noise held fixed during the ablation.
    pub ablate_sigma: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            sequences: vec!["00".to_string()],
            window: 2,
            stride: 1,
            prior_kind: PriorKind::OneHot,
            source: SourceConfig::Files { root: None },
            proposal: ProposalParams::default(),
            output: PathBuf::from("out"),
            threads: default_threads(),
            seed: 0,
            class_map: None,
            ablate_rho: vec![0.0, 0.1, 0.3],
            ablate_priors: vec![PriorKind::OneHot, PriorKind::Confidence],
            ablate_sigma: 0.2,
        }
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Keys read by [`PipelineConfig::from_key_values`].
pub const PIPELINE_KEYS: &[&str] = &[
    "dataset_root",
    "sequences",
    "window",
    "stride",
    "prior",
    "source",
    "predictions_root",
    "flip_prob",
    "offset_sigma",
    "k_proposals",
    "group_radius",
    "dbscan_eps",
    "dbscan_min_pts",
    "huber_delta",
    "group_space",
    "seed_filter",
    "output",
    "threads",
    "seed",
    "class_map",
    "ablate_rho",
    "ablate_priors",
    "ablate_sigma",
];

fn parse_choice<T>(kv: &KeyValues, key: &str, choices: &[(&str, T)], default: T) -> Result<T, ConfigError>
where
    T: Copy,
{
    match kv.raw(key) {
        None => Ok(default),
        Some(v) => choices
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| ConfigError::Value {
                key: key.to_string(),
                value: v.to_string(),
                reason: format!(
                    "expected one of {}",
                    choices.iter().map(|c| c.0).collect::<Vec<_>>().join(", ")
                ),
            }),
    }
}

impl PipelineConfig {
    /// Reads and validates pipeline keys; unset keys keep their defaults.
    /// The dataset root falls back to `DPLS_DATASET_ROOT`.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ConfigError> {
        let d = Self::default();
        let window = kv.get_or("window", d.window)?;
        let stride = kv.get_or("stride", window.saturating_sub(1).max(1))?;
        let dataset_root = kv
            .get::<PathBuf>("dataset_root")?
            .or_else(|| std::env::var_os(DATASET_ROOT_ENV).map(PathBuf::from));
        let source = match kv.raw("source").unwrap_or("files") {
            "files" => SourceConfig::Files {
                root: kv.get("predictions_root")?,
            },
            "oracle" => SourceConfig::Oracle {
                flip_prob: kv.get_or("flip_prob", 0.0)?,
                offset_sigma: kv.get_or("offset_sigma", 0.0)?,
            },
            other => {
                return Err(ConfigError::Value {
                    key: "source".into(),
                    value: other.into(),
                    reason: "expected files or oracle".into(),
                })
            }
        };
        let dp = ProposalParams::default();
        let proposal = ProposalParams {
            k_proposals: kv.get("k_proposals")?,
            group_radius_m: kv.get_or("group_radius", dp.group_radius_m)?,
            dbscan_eps_m: kv.get_or("dbscan_eps", dp.dbscan_eps_m)?,
            dbscan_min_pts: kv.get_or("dbscan_min_pts", dp.dbscan_min_pts)?,
            huber_delta_m: kv.get_or("huber_delta", dp.huber_delta_m)?,
            group_space: parse_choice(
                kv,
                "group_space",
                &[("centers", GroupSpace::Centers), ("positions", GroupSpace::Positions)],
                dp.group_space,
            )?,
            seed_filter: parse_choice(
                kv,
                "seed_filter",
                &[("things", SeedFilter::Things), ("all", SeedFilter::All)],
                dp.seed_filter,
            )?,
        };
        let config = Self {
            dataset_root,
            sequences: kv.get_list("sequences")?.unwrap_or(d.sequences),
            window,
            stride,
            prior_kind: kv.get_or("prior", d.prior_kind)?,
            source,
            proposal,
            output: kv.get_or("output", d.output)?,
            threads: kv.get_or("threads", d.threads)?,
            seed: kv.get_or("seed", d.seed)?,
            class_map: kv.get("class_map")?,
            ablate_rho: kv.get_list("ablate_rho")?.unwrap_or(d.ablate_rho),
            ablate_priors: kv.get_list("ablate_priors")?.unwrap_or(d.ablate_priors),
            ablate_sigma: kv.get_or("ablate_sigma", d.ablate_sigma)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.stride == 0 || self.stride > self.window {
            return bad(format!("stride {} must be in [1, window = {}]", self.stride, self.window));
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if let SourceConfig::Oracle { flip_prob, offset_sigma } = self.source {
            if !(0.0..=1.0).contains(&flip_prob) || offset_sigma < 0.0 {
                return bad("flip_prob must be in [0, 1] and offset_sigma nonnegative".into());
            }
        }
        if self.ablate_rho.iter().any(|r| !(0.0..=1.0).contains(r)) || self.ablate_sigma < 0.0 {
            return bad("ablate_rho values must be in [0, 1] and ablate_sigma nonnegative".into());
        }
        let p = &self.proposal;
        if !(p.group_radius_m > 0.0 && p.dbscan_eps_m > 0.0 && p.huber_delta_m > 0.0) || p.dbscan_min_pts == 0 {
            return bad("group_radius, dbscan_eps, huber_delta and dbscan_min_pts must be positive".into());
        }
        Ok(())
    }

    pub fn load_class_map(&self) -> Result<ClassMap, ClassMapError> {
        match &self.class_map {
            Some(p) => ClassMap::load(p),
            None => Ok(ClassMap::semantic_kitti()),
        }
    }

    pub fn dataset_root(&self) -> Result<&Path, ConfigError> {
        self.dataset_root.as_deref().ok_or_else(|| {
            ConfigError::Invalid(format!("no dataset root: set dataset_root or {DATASET_ROOT_ENV}"))
        })
    }
}

pub fn sequence_dir(root: &Path, sequence: &str) -> PathBuf {
    root.join("sequences").join(sequence)
}

/// Random access to a sequence's scans and sensor poses.
pub trait ScanStore: Sync {
    fn n_scans(&self) -> usize;
    fn scan(&self, index: usize) -> Result<PointCloudScan, FormatError>;
    fn pose(&self, index: usize) -> &RigidTransform;
}

/// Scans held in memory.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    pub scans: Vec<PointCloudScan>,
    pub poses: Vec<RigidTransform>,
}

impl MemoryStore {
    pub fn from_scene(scene: &synth::Scene) -> Self {
        Self {
            scans: scene.scans.clone(),
            poses: scene.lidar_poses.clone(),
        }
    }
}

impl ScanStore for MemoryStore {
    fn n_scans(&self) -> usize {
        self.scans.len()
    }

    fn scan(&self, index: usize) -> Result<PointCloudScan, FormatError> {
        Ok(self.scans[index].clone())
    }

    fn pose(&self, index: usize) -> &RigidTransform {
        &self.poses[index]
    }
}

/// Scans read from disk on demand; poses are read up front.
#[derive(Debug, Clone)]
pub struct DiskStore {
    pub layout: SequenceLayout,
    pub poses: Vec<RigidTransform>,
}

impl DiskStore {
    pub fn open(dir: &Path, sequence: &str) -> Result<Self, PipelineError> {
        let layout = SequenceLayout::new(dir);
        let n = layout.count_scans();
        if n == 0 {
            return Err(PipelineError::Dataset {
                sequence: sequence.to_string(),
                reason: format!("no scans under {}", dir.join("velodyne").display()),
            });
        }
        let calib = formats::read_calib(layout.calib())?;
        let poses: Vec<RigidTransform> = formats::read_poses(layout.poses())?
            .iter()
            .map(|p| lidar_pose_from_camera_pose(p, &calib))
            .collect();
        if poses.len() < n {
            return Err(PipelineError::Dataset {
                sequence: sequence.to_string(),
                reason: format!("{n} scans but only {} poses", poses.len()),
            });
        }
        Ok(Self { layout, poses })
    }
}

impl ScanStore for DiskStore {
    fn n_scans(&self) -> usize {
        self.layout.count_scans()
    }

    fn scan(&self, index: usize) -> Result<PointCloudScan, FormatError> {
        formats::read_scan(self.layout.scan(index), index)
    }

    fn pose(&self, index: usize) -> &RigidTransform {
        &self.poses[index]
    }
}

/// Windowing and segmentation settings for [`run_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    pub window: usize,
    pub stride: usize,
    pub proposal: ProposalParams,
    pub threads: usize,
}

impl From<&PipelineConfig> for RunParams {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            window: c.window,
            stride: c.stride,
            proposal: c.proposal.clone(),
            threads: c.threads,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub windows: Vec<(Window, WindowStats)>,
    pub stitches: Vec<StitchReport>,
    pub instances: u32,
    pub elapsed: Duration,
}

impl RunSummary {
    /// Points per second through shift, FPS and grouping, over all windows.
    pub fn group_stage_throughput(&self) -> f64 {
        let points: usize = self.windows.iter().map(|(_, s)| s.n_points).sum();
        let secs: f64 = self.windows.iter().map(|(_, s)| s.shift_fps_group.as_secs_f64()).sum();
        if secs > 0.0 {
            points as f64 / secs
        } else {
            f64::INFINITY
        }
    }
}

fn process_window(
    store: &dyn ScanStore,
    source: &dyn PredictionSource,
    params: &RunParams,
    class_map: &ClassMap,
    w: Window,
) -> Result<(InstanceSegmentation, WindowStats), PipelineError> {
    let (start, end) = (w.start, w.end());
    let mut scans = Vec::with_capacity(w.len);
    let mut priors = Vec::with_capacity(w.len);
    let mut poses = Vec::with_capacity(w.len);
    for s in start..end {
        let scan = store.scan(s)?;
        let prior = source
            .semantic_prior(s, scan.len())
            .map_err(|source| PipelineError::Source { start, end, source })?;
        scans.push(scan);
        priors.push(prior);
        poses.push(*store.pose(s));
    }
    let cloud = aggregate(&scans, &poses, &priors, Window::new(0, w.len))
        .map_err(|source| PipelineError::Aggregate { start, end, source })?;
    drop((scans, priors));
    let field = source
        .offsets(&cloud)
        .map_err(|source| PipelineError::Source { start, end, source })?;
    let out = segment_window(&cloud, &field, &params.proposal, class_map)
        .map_err(|source| PipelineError::Proposal { start, end, source })?;
    Ok((out.segmentation, out.stats))
}

fn log_window(w: Window, s: &WindowStats) {
    let secs = s.shift_fps_group.as_secs_f64();
    let rate = if secs > 0.0 { s.n_points as f64 / secs / 1e6 } else { f64::INFINITY };
    info!(
        "window {}..{}: {} points, {} seed candidates, K={}, {} proposals, {} clusters, {} instances; \
         shift+fps+group {:.1} ms ({:.2} Mpts/s), refine+merge {:.1} ms",
        w.start,
        w.end(),
        s.n_points,
        s.n_seed_candidates,
        s.k,
        s.n_proposals,
        s.n_clusters,
        s.n_instances,
        secs * 1e3,
        rate,
        s.refine_merge.as_secs_f64() * 1e3
    );
}

/// Segments a whole sequence window by window and stitches instance ids.
///
/// Windows are segmented in parallel batches on a pool of `params.threads`
/// workers; stitching folds over them in window order, so the output does not
/// depend on the thread count. Each scan is emitted once, from the first
/// window containing it, as `(scan_index, semantic, instance)`.
pub fn run_sequence(
    store: &dyn ScanStore,
    source: &dyn PredictionSource,
    params: &RunParams,
    class_map: &ClassMap,
    mut sink: impl FnMut(usize, &[TrainId], &[u32]) -> Result<(), PipelineError>,
) -> Result<RunSummary, PipelineError> {
    let t0 = Instant::now();
    let windows = plan_windows(store.n_scans(), params.window, params.stride);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.threads)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    let batch = params.threads * 2;

    let mut summary = RunSummary::default();
    let mut state = TrackState::default();
    let mut prev: Option<InstanceSegmentation> = None;
    let mut next_emit = 0;
    for chunk in windows.chunks(batch.max(1)) {
        let results: Vec<Result<(InstanceSegmentation, WindowStats), PipelineError>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&w| process_window(store, source, params, class_map, w))
                .collect()
        });
        for (&w, result) in chunk.iter().zip(results) {
            let (seg, stats) = result?;
            log_window(w, &stats);
            let overlap = prev.as_ref().map(|p| overlap_origins(p, &seg)).unwrap_or_default();
            let (s, relabeled, report) = stitch(state, prev.as_ref(), &seg, &overlap)?;
            state = s;
            let mut offset = 0;
            for scan in w.start..w.end() {
                let n = relabeled.origins[offset..]
                    .iter()
                    .take_while(|o| o.scan_index as usize == scan)
                    .count();
                if scan >= next_emit {
                    let range = offset..offset + n;
                    sink(scan, &relabeled.semantic[range.clone()], &relabeled.instance[range])?;
                    next_emit = scan + 1;
                }
                offset += n;
            }
            summary.windows.push((w, stats));
            summary.stitches.push(report);
            prev = Some(relabeled);
        }
    }
    summary.instances = state.next_global_id - 1;
    summary.elapsed = t0.elapsed();
    info!(
        "{} windows, {} sequence instances, {:.2} s, shift+fps+group {:.2} Mpts/s",
        summary.windows.len(),
        summary.instances,
        summary.elapsed.as_secs_f64(),
        summary.group_stage_throughput() / 1e6
    );
    Ok(summary)
}

/// Ground-truth labels of a sequence directory, remapped to train ids.
pub fn read_ground_truth_labels(
    dir: &Path,
    n_scans: usize,
    class_map: &ClassMap,
) -> Result<Vec<ScanLabels>, PipelineError> {
    let layout = SequenceLayout::new(dir);
    (0..n_scans)
        .map(|i| {
            let records = formats::read_labels_any(layout.label(i))?;
            Ok(labels_from_records(&records, class_map))
        })
        .collect()
}

fn labels_from_records(records: &[formats::LabelRecord], class_map: &ClassMap) -> ScanLabels {
    ScanLabels {
        semantic: remap(records, class_map).ids,
        instance: records.iter().map(|r| u32::from(r.instance_id)).collect(),
    }
}

fn oracle_truth(store: &dyn ScanStore, labels: &[ScanLabels], class_map: &ClassMap) -> Result<GroundTruth, PipelineError> {
    let scans = (0..store.n_scans()).map(|i| store.scan(i)).collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<(Vec<TrainId>, Vec<u32>)> = labels
        .iter()
        .map(|l| (l.semantic.clone(), l.instance.clone()))
        .collect();
    Ok(GroundTruth::from_labels(&scans, &pairs, class_map))
}

fn make_source(
    config: &PipelineConfig,
    root: &Path,
    sequence: &str,
    store: &dyn ScanStore,
    class_map: &ClassMap,
) -> Result<Box<dyn PredictionSource>, PipelineError> {
    Ok(match &config.source {
        SourceConfig::Files { root: pred_root } => {
            let dir = sequence_dir(pred_root.as_deref().unwrap_or(root), sequence);
            let files = match config.prior_kind {
                PriorKind::OneHot => SemanticFiles::Labels,
                PriorKind::Confidence => SemanticFiles::Confidences,
            };
            Box::new(FileProvider::new(dir, files, class_map.clone()))
        }
        SourceConfig::Oracle { flip_prob, offset_sigma } => {
            let dir = sequence_dir(root, sequence);
            let labels = read_ground_truth_labels(&dir, store.n_scans(), class_map)?;
            let truth = oracle_truth(store, &labels, class_map)?;
            Box::new(OracleProvider {
                truth: Arc::new(truth),
                prior_kind: config.prior_kind,
                flip_prob: *flip_prob,
                offset_sigma: *offset_sigma,
                seed: config.seed,
                num_classes: class_map.num_classes(),
            })
        }
    })
}

/// Generates the configured scene and writes it as sequence `sequences[0]`
/// under the dataset root. Returns the sequence directory.
pub fn cmd_synth(kv: &KeyValues) -> Result<PathBuf, PipelineError> {
    let config = PipelineConfig::from_key_values(kv)?;
    let class_map = config.load_class_map()?;
    let scene_config = SceneConfig::from_key_values(kv, &class_map)?;
    let root = config.dataset_root()?;
    let dir = sequence_dir(root, &config.sequences[0]);
    let scene = synth::generate(&scene_config)?;
    synth::write_sequence(&dir, &scene, &class_map)?;
    let thing_points: usize = scene.truth.scans[0].instance.iter().filter(|i| **i != 0).count();
    info!(
        "sequence {}: {} scans x {} points, {} objects ({} thing points per scan), {} boxes, seed {}",
        config.sequences[0],
        scene.scans.len(),
        scene_config.points_per_scan,
        scene.truth.objects.len(),
        thing_points,
        scene.boxes.len(),
        scene_config.seed
    );
    Ok(dir)
}

/// Segments every configured sequence and writes prediction label files.
pub fn cmd_segment(config: &PipelineConfig) -> Result<Vec<RunSummary>, PipelineError> {
    let class_map = config.load_class_map()?;
    let root = config.dataset_root()?;
    let params = RunParams::from(config);
    let mut out = Vec::new();
    for sequence in &config.sequences {
        let store = DiskStore::open(&sequence_dir(root, sequence), sequence)?;
        let source = make_source(config, root, sequence, &store, &class_map)?;
        let dest = SequenceLayout::new(sequence_dir(&config.output, sequence));
        let pred_dir = dest.prediction(0);
        let pred_dir = pred_dir.parent().expect("prediction path has a directory");
        std::fs::create_dir_all(pred_dir).map_err(io_err(pred_dir))?;
        info!("sequence {sequence}: {} scans, window {} stride {}", store.n_scans(), config.window, config.stride);
        let summary = run_sequence(&store, source.as_ref(), &params, &class_map, |scan, semantic, instance| {
            let labels: Vec<(u32, u32)> = semantic
                .iter()
                .zip(instance)
                .map(|(&s, &i)| (u32::from(class_map.to_raw(s)), i))
                .collect();
            formats::write_predictions(dest.prediction(scan), &labels)?;
            Ok(())
        })?;
        out.push(summary);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvaluationOutput {
    pub per_sequence: Vec<(String, LstqReport)>,
    pub overall: LstqReport,
}

/// Scores predictions under `pred_root` against labels under `gt_root`.
///
/// Predictions are read from `predictions/`, or from `labels/` when a
/// sequence has no `predictions/` directory (so a dataset can be scored
/// against itself). Reports are written to `out_dir` in both formats.
pub fn cmd_evaluate(
    pred_root: &Path,
    gt_root: &Path,
    sequences: &[String],
    class_map: &ClassMap,
    out_dir: &Path,
) -> Result<EvaluationOutput, PipelineError> {
    let mut overall = LstqAccumulator::new(class_map);
    let mut per_sequence = Vec::new();
    for (k, sequence) in sequences.iter().enumerate() {
        if k > 0 {
            overall.next_sequence();
        }
        let gt = SequenceLayout::new(sequence_dir(gt_root, sequence));
        let pred = SequenceLayout::new(sequence_dir(pred_root, sequence));
        let use_predictions = pred.prediction(0).parent().is_some_and(Path::is_dir);
        let n = gt.count_scans_with_labels();
        if n == 0 {
            return Err(PipelineError::Dataset {
                sequence: sequence.clone(),
                reason: format!("no label files under {}", gt.label(0).parent().unwrap_or(gt_root).display()),
            });
        }
        let mut acc = LstqAccumulator::new(class_map);
        for i in 0..n {
            let gt_records = formats::read_labels_any(gt.label(i))?;
            let pred_path = if use_predictions { pred.prediction(i) } else { pred.label(i) };
            let pred_records = formats::read_labels(&pred_path, gt_records.len())?;
            let g = labels_from_records(&gt_records, class_map);
            let p = labels_from_records(&pred_records, class_map);
            acc.add_scan(&p, &g)?;
            overall.add_scan(&p, &g)?;
        }
        let report = acc.report();
        write_report(out_dir, &format!("lstq_{sequence}"), &report, class_map)?;
        info!("sequence {sequence}: LSTQ {:.2}", report.lstq * 100.0);
        per_sequence.push((sequence.clone(), report));
    }
    let overall = overall.report();
    write_report(out_dir, "lstq", &overall, class_map)?;
    Ok(EvaluationOutput { per_sequence, overall })
}

fn write_report(dir: &Path, stem: &str, report: &LstqReport, class_map: &ClassMap) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let kv = dir.join(format!("{stem}.txt"));
    std::fs::write(&kv, report.to_key_values(class_map)).map_err(io_err(&kv))?;
    let table = dir.join(format!("{stem}_table.txt"));
    std::fs::write(&table, report.to_table(class_map)).map_err(io_err(&table))?;
    Ok(())
}

/// One row of a published-scores fixture: percentages as printed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub name: String,
    pub lstq: Option<f64>,
    pub s_assoc: f64,
    pub s_cls: f64,
}

/// Parses `name lstq s_assoc s_cls` rows (percentages, `-` for missing).
/// Rows missing `s_assoc` or `s_cls` are skipped.
pub fn parse_score_fixture(origin: &str, text: &str) -> Result<Vec<ScoreRow>, ConfigError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let syntax = || ConfigError::Syntax {
            origin: origin.to_string(),
            line: i + 1,
            text: line.to_string(),
        };
        if cols.len() < 4 {
            return Err(syntax());
        }
        let num = |s: &str| -> Result<Option<f64>, ConfigError> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| syntax())
            }
        };
        if let (Some(s_assoc), Some(s_cls)) = (num(cols[2])?, num(cols[3])?) {
            rows.push(ScoreRow {
                name: cols[0].to_string(),
                lstq: num(cols[1])?,
                s_assoc,
                s_cls,
            });
        }
    }
    Ok(rows)
}

/// Recomputes LSTQ for each fixture row: `(row, computed LSTQ %)`.
pub fn recompute_scores(rows: &[ScoreRow]) -> Vec<(ScoreRow, f64)> {
    rows.iter()
        .map(|r| (r.clone(), lstq(r.s_cls / 100.0, r.s_assoc / 100.0) * 100.0))
        .collect()
}

pub fn format_score_table(rows: &[(ScoreRow, f64)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>9} {:>8} {:>8} {:>8} {:>7}", "row", "S_assoc%", "S_cls%", "LSTQ%", "printed", "diff");
    for (r, v) in rows {
        let (printed, diff) = match r.lstq {
            Some(p) => (format!("{p:.2}"), format!("{:+.4}", v - p)),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(out, "{:<24} {:>9.2} {:>8.2} {:>8.2} {:>8} {:>7}", r.name, r.s_assoc, r.s_cls, v, printed, diff);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub prior: PriorKind,
    pub flip_prob: f64,
    pub report: LstqReport,
}

/// Runs the oracle pipeline over `priors x rho` with fixed offset noise and
/// scores each run against ground truth. Rows come out in grid order.
pub fn ablate(
    store: &dyn ScanStore,
    truth: &Arc<GroundTruth>,
    labels: &[ScanLabels],
    config: &PipelineConfig,
    class_map: &ClassMap,
) -> Result<Vec<AblationRow>, PipelineError> {
    let params = RunParams::from(config);
    let mut rows = Vec::new();
    for &prior in &config.ablate_priors {
        for &rho in &config.ablate_rho {
            let source = OracleProvider {
                truth: Arc::clone(truth),
                prior_kind: prior,
                flip_prob: rho,
                offset_sigma: config.ablate_sigma,
                seed: config.seed,
                num_classes: class_map.num_classes(),
            };
            let mut acc = LstqAccumulator::new(class_map);
            run_sequence(store, &source, &params, class_map, |scan, semantic, instance| {
                let pred = ScanLabels {
                    semantic: semantic.to_vec(),
                    instance: instance.to_vec(),
                };
                acc.add_scan(&pred, &labels[scan])?;
                Ok(())
            })?;
            let report = acc.report();
            info!("ablation {prior} rho={rho}: LSTQ {:.2}", report.lstq * 100.0);
            rows.push(AblationRow {
                prior,
                flip_prob: rho,
                report,
            });
        }
    }
    Ok(rows)
}

pub fn format_ablation_table(rows: &[AblationRow], sigma: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<11} {:>5} {:>7} {:>8} {:>9} {:>8} {:>8} {:>8}",
        "prior", "rho", "sigma", "LSTQ%", "S_assoc%", "S_cls%", "IoU_Th%", "IoU_St%"
    );
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            out,
            "{:<11} {:>5.2} {:>7.2} {:>8.2} {:>9.2} {:>8.2} {:>8.2} {:>8.2}",
            r.prior.to_string(),
            r.flip_prob,
            sigma,
            p.lstq * 100.0,
            p.s_assoc * 100.0,
            p.s_cls * 100.0,
            p.iou_th * 100.0,
            p.iou_st * 100.0
        );
    }
    out
}

/// Ablation over the first configured sequence; writes `ablation.txt` to the
/// output directory and returns the table.
pub fn cmd_ablate(config: &PipelineConfig) -> Result<String, PipelineError> {
    let class_map = config.load_class_map()?;
    if config.ablate_priors.is_empty() || config.ablate_rho.is_empty() {
        warn!("empty ablation grid");
    }
    let table = if config.ablate_priors.is_empty() || config.ablate_rho.is_empty() {
        format_ablation_table(&[], config.ablate_sigma)
    } else {
        let root = config.dataset_root()?;
        let sequence = &config.sequences[0];
        let dir = sequence_dir(root, sequence);
        let store = DiskStore::open(&dir, sequence)?;
        let labels = read_ground_truth_labels(&dir, store.n_scans(), &class_map)?;
        let truth = Arc::new(oracle_truth(&store, &labels, &class_map)?);
        let rows = ablate(&store, &truth, &labels, config, &class_map)?;
        format_ablation_table(&rows, config.ablate_sigma)
    };
    std::fs::create_dir_all(&config.output).map_err(io_err(&config.output))?;
    let path = config.output.join("ablation.txt");
    std::fs::write(&path, &table).map_err(io_err(&path))?;
    Ok(table)
}

/// Human-readable header and statistics of a scan, label, poses, calib or
/// class-map file, chosen by file name.
pub fn inspect(path: &Path, class_map: &ClassMap) -> Result<String, PipelineError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let mut out = String::new();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => {
            let scan = formats::read_scan(path, 0)?;
            let _ = writeln!(out, "scan {}: {} points", path.display(), scan.len());
            if !scan.is_empty() {
                let mut lo = [f32::INFINITY; 3];
                let mut hi = [f32::NEG_INFINITY; 3];
                for p in &scan.points {
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
                let (fmin, fmax) = scan
                    .feature
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
                let _ = writeln!(out, "x {:.3} .. {:.3}", lo[0], hi[0]);
                let _ = writeln!(out, "y {:.3} .. {:.3}", lo[1], hi[1]);
                let _ = writeln!(out, "z {:.3} .. {:.3}", lo[2], hi[2]);
                let _ = writeln!(out, "remission {fmin:.3} .. {fmax:.3}");
            }
        }
        Some("label") => {
            let records = formats::read_labels_any(path)?;
            let mapped = remap(&records, class_map);
            let mut hist = vec![0usize; class_map.num_classes()];
            let mut ignored = 0;
            for id in &mapped.ids {
                match hist.get_mut(*id as usize) {
                    Some(h) => *h += 1,
                    None => ignored += 1,
                }
            }
            let mut instances: Vec<u16> = records.iter().map(|r| r.instance_id).filter(|i| *i != 0).collect();
            instances.sort_unstable();
            instances.dedup();
            let _ = writeln!(
                out,
                "labels {}: {} points, {} instances, {} ignored, {} unknown raw ids",
                path.display(),
                records.len(),
                instances.len(),
                ignored,
                mapped.unknown
            );
            for (k, n) in hist.iter().enumerate().filter(|(_, n)| **n > 0) {
                let _ = writeln!(out, "{:<16} {n}", class_map.name(k as TrainId));
            }
        }
        _ if name.starts_with("poses") => {
            let poses = formats::read_poses(path)?;
            let length: f64 = poses
                .windows(2)
                .map(|w| (w[1].translation - w[0].translation).norm())
                .sum();
            let _ = writeln!(out, "poses {}: {} poses, path length {:.3} m", path.display(), poses.len(), length);
        }
        _ if name.starts_with("calib") => {
            let calib = formats::read_calib(path)?;
            let _ = writeln!(out, "calib {}: Tr rotation {} translation {}", path.display(), calib.rotation, calib.translation.transpose());
        }
        _ => {
            let map = ClassMap::load(path)?;
            let _ = writeln!(out, "class map {}: {} classes", path.display(), map.num_classes());
            for k in 0..map.num_classes() {
                let id = k as TrainId;
                let kind = if map.is_thing(id) { "thing" } else { "stuff" };
                let _ = writeln!(out, "{k:>3} {:<16} {kind} raw {}", map.name(id), map.to_raw(id));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stride_is_window_minus_one() {
        let kv = KeyValues::parse("t", "window = 4\n").unwrap();
        let c = PipelineConfig::from_key_values(&kv).unwrap();
        assert_eq!((c.window, c.stride), (4, 3));
        let kv = KeyValues::parse("t", "window = 1\n").unwrap();
        assert_eq!(PipelineConfig::from_key_values(&kv).unwrap().stride, 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "window = 2\nstride = 3\n",
            "window = 0\n",
            "stride = 0\n",
            "prior = soft\n",
            "source = oracle\nflip_prob = 1.5\n",
            "group_space = voxels\n",
            "threads = 0\n",
        ] {
            let kv = KeyValues::parse("t", text).unwrap();
            assert!(PipelineConfig::from_key_values(&kv).is_err(), "{text}");
        }
    }

    #[test]
    fn score_fixture_parsing() {
        let rows = parse_score_fixture("t", "# c\na 58.01 65.50 51.38\nb - 72.90 -\nc - 60 50\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].lstq, Some(58.01));
        assert_eq!(rows[1].lstq, None);
        assert!(parse_score_fixture("t", "a 1 2\n").is_err());
    }

    #[test]
    fn empty_ablation_is_header_only() {
        let table = format_ablation_table(&[], 0.2);
        assert_eq!(table.lines().count(), 1);
        assert!(table.starts_with("prior"));
    }
}
