//! Deterministic synthetic scenes with ground truth, and oracle prediction
//! sources derived from that ground truth.
//!
//! A scene is a ground plane plus static box obstacles (stuff) and spherical
//! rigid point blobs moving on straight lines (things), observed by an ego
//! sensor following a waypoint polyline.
//!
//! # Random numbers
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`. Independent draws use separate ChaCha streams
//! (`set_stream`), so every scan and every noise source can be regenerated in
//! isolation. Stream ids:
//!
//! | stream                     | use                          |
//! |----------------------------|------------------------------|
//! | `1`                        | layout (boxes, objects)      |
//! | `0x1_0000_0000 + k`        | points of scan `k`           |
//! | `0x2_0000_0000 + k`        | semantic label flips, scan `k` |
//! | `0x3_0000_0000 + k`        | offset noise, scan `k`       |
//! | `0x4_0000_0000 + k`        | confidence rows, scan `k`    |
//!
//! Test vector: `ChaCha8Rng::seed_from_u64(0).next_u64()` is
//! `0xb585f767a79a3b6c`.

use std::f64::consts::PI;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ConfigError, KeyValues};
use crate::formats::{self, CalibRecord, FormatError, LabelRecord, PointCloudScan, SequenceLayout};
use crate::geometry::{camera_pose_from_lidar_pose, Aggregated4DCloud, RigidTransform};
use crate::lstq::ScanLabels;
use crate::proposal::{OffsetField, Vec3};
use crate::semantic::{
    encode_one_hot, normalize_confidences, ClassMap, PredictionSource, PriorKind, SemanticPrior,
    SourceError, TrainId, IGNORE,
};

pub const SENSOR_HEIGHT_M: f64 = 1.73;
/// Minimum distance between an object's center and any box surface, beyond its radius.
pub const BOX_CLEARANCE_M: f64 = 1.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

const STREAM_LAYOUT: u64 = 1;
const STREAM_SCAN: u64 = 1 << 32;
const STREAM_FLIP: u64 = 2 << 32;
const STREAM_OFFSET: u64 = 3 << 32;
const STREAM_CONFIDENCE: u64 = 4 << 32;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_scans: usize,
    pub points_per_scan: usize,
    pub n_objects: usize,
    /// Thing classes and their relative sampling weights.
    pub object_class_mix: Vec<(TrainId, f64)>,
    pub speed_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub min_gap: f64,
    pub separable: bool,
    pub n_boxes: usize,
    pub ground_radius: f64,
    /// Ego path in the world xy plane.
    pub waypoints: Vec<[f64; 2]>,
    pub scan_period: f64,
    /// Object surface sampling density, points per square meter.
    pub object_density: f64,
    /// Gap between an object's lowest point and the ground.
    pub clearance: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_scans: 4,
            points_per_scan: 20_000,
            n_objects: 5,
            object_class_mix: vec![(0, 3.0), (3, 1.0), (5, 1.0), (6, 1.0)],
            speed_range: (0.0, 4.0),
            radius_range: (0.6, 1.4),
            min_gap: 3.0,
            separable: true,
            n_boxes: 6,
            ground_radius: 40.0,
            waypoints: vec![[0.0, 0.0], [6.0, 0.0]],
            scan_period: 0.1,
            object_density: 80.0,
            clearance: 0.5,
            seed: 7,
        }
    }
}

/// Config keys understood by [`SceneConfig::from_key_values`].
pub const SCENE_KEYS: &[&str] = &[
    "n_scans",
    "points_per_scan",
    "n_objects",
    "object_classes",
    "speed_min",
    "speed_max",
    "radius_min",
    "radius_max",
    "min_gap",
    "separable",
    "n_boxes",
    "ground_radius",
    "waypoints",
    "scan_period",
    "object_density",
    "clearance",
    "seed",
];

/// The shipped reference scene (4 scans, 6 separable objects, 24k points per scan).
pub const REFERENCE_SCENE: &str = include_str!("../data/reference_scene.cfg");

impl SceneConfig {
    pub fn reference(class_map: &ClassMap) -> Self {
        let kv = KeyValues::parse("reference_scene.cfg", REFERENCE_SCENE).expect("shipped config parses");
        Self::from_key_values(&kv, class_map).expect("shipped config is valid")
    }

    /// Reads scene keys, falling back to defaults.
    ///
    /// `object_classes = car:3, person:1` names thing classes with weights;
    /// `waypoints = 0:0, 6:0` lists ego positions as `x:y`.
    pub fn from_key_values(kv: &KeyValues, class_map: &ClassMap) -> Result<Self, SynthError> {
        let d = Self::default();
        let mut c = Self {
            n_scans: kv.get_or("n_scans", d.n_scans)?,
            points_per_scan: kv.get_or("points_per_scan", d.points_per_scan)?,
            n_objects: kv.get_or("n_objects", d.n_objects)?,
            object_class_mix: d.object_class_mix.clone(),
            speed_range: (
                kv.get_or("speed_min", d.speed_range.0)?,
                kv.get_or("speed_max", d.speed_range.1)?,
            ),
            radius_range: (
                kv.get_or("radius_min", d.radius_range.0)?,
                kv.get_or("radius_max", d.radius_range.1)?,
            ),
            min_gap: kv.get_or("min_gap", d.min_gap)?,
            separable: kv.get_or("separable", d.separable)?,
            n_boxes: kv.get_or("n_boxes", d.n_boxes)?,
            ground_radius: kv.get_or("ground_radius", d.ground_radius)?,
            waypoints: d.waypoints.clone(),
            scan_period: kv.get_or("scan_period", d.scan_period)?,
            object_density: kv.get_or("object_density", d.object_density)?,
            clearance: kv.get_or("clearance", d.clearance)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        if let Some(items) = kv.get_list::<String>("object_classes")? {
            c.object_class_mix = items
                .iter()
                .map(|item| {
                    let (name, w) = item.split_once(':').unwrap_or((item, "1"));
                    let id = (0..class_map.num_classes())
                        .find(|&k| class_map.name(k as TrainId) == name)
                        .ok_or_else(|| ConfigError::Invalid(format!("unknown class {name:?}")))?;
                    let w: f64 = w
                        .parse()
                        .map_err(|_| ConfigError::Invalid(format!("bad weight in {item:?}")))?;
                    Ok((id as TrainId, w))
                })
                .collect::<Result<_, ConfigError>>()?;
        }
        if let Some(items) = kv.get_list::<String>("waypoints")? {
            c.waypoints = items
                .iter()
                .map(|item| {
                    let parsed = item
                        .split_once(':')
                        .and_then(|(x, y)| Some([x.parse().ok()?, y.parse().ok()?]));
                    parsed.ok_or_else(|| ConfigError::Invalid(format!("bad waypoint {item:?}")))
                })
                .collect::<Result<_, ConfigError>>()?;
        }
        c.validate(class_map)?;
        Ok(c)
    }

    pub fn validate(&self, class_map: &ClassMap) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_scans == 0 || self.points_per_scan == 0 {
            return bad("n_scans and points_per_scan must be positive".into());
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("radius range {r0}..{r1} is empty or nonpositive"));
        }
        let (s0, s1) = self.speed_range;
        if !(s0 >= 0.0 && s0 <= s1) {
            return bad(format!("speed range {s0}..{s1} is invalid"));
        }
        if self.separable && self.min_gap <= 2.0 * r1 {
            return bad(format!(
                "separable scenes need min_gap ({}) > 2 x max radius ({})",
                self.min_gap, r1
            ));
        }
        if self.waypoints.is_empty() {
            return bad("at least one waypoint is required".into());
        }
        if self.n_objects > 0 && self.object_class_mix.iter().all(|(_, w)| *w <= 0.0) {
            return bad("object class weights must include a positive entry".into());
        }
        if let Some((id, _)) = self.object_class_mix.iter().find(|(id, _)| !class_map.is_thing(*id)) {
            return bad(format!("object class {} is not a thing class", class_map.name(*id)));
        }
        if !(self.scan_period > 0.0 && self.object_density > 0.0 && self.ground_radius > 0.0) {
            return bad("scan_period, object_density and ground_radius must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub instance_id: u32,
    pub class: TrainId,
    pub radius: f64,
    /// World center at t = 0.
    pub start: Vec3,
    /// World velocity, m/s.
    pub velocity: Vec3,
    /// Rigid surface samples relative to the center.
    pub body: Vec<Vec3>,
}

impl ObjectTrack {
    pub fn center_at(&self, t: f64) -> Vec3 {
        [
            self.start[0] + self.velocity[0] * t,
            self.start[1] + self.velocity[1] * t,
            self.start[2] + self.velocity[2] * t,
        ]
    }

    pub fn speed(&self) -> f64 {
        self.velocity.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxObstacle {
    pub class: TrainId,
    pub min: Vec3,
    pub max: Vec3,
}

impl BoxObstacle {
    pub fn distance_to(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|a| (self.min[a] - p[a]).max(0.0).max(p[a] - self.max[a]))
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt()
    }
}

/// Ground truth of one scan, aligned with its points. Centers are in the
/// scan's sensor frame; stuff points carry their own position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanTruth {
    pub semantic: Vec<TrainId>,
    pub instance: Vec<u32>,
    pub center: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub scans: Vec<ScanTruth>,
    pub objects: Vec<ObjectTrack>,
}

impl GroundTruth {
    /// Per-scan semantic and instance labels for scoring.
    pub fn scan_labels(&self) -> Vec<ScanLabels> {
        self.scans
            .iter()
            .map(|t| ScanLabels {
                semantic: t.semantic.clone(),
                instance: t.instance.clone(),
            })
            .collect()
    }

    /// Builds ground truth from labeled scans; each thing instance's center is
    /// the centroid of its points in that scan.
    pub fn from_labels(
        scans: &[PointCloudScan],
        labels: &[(Vec<TrainId>, Vec<u32>)],
        class_map: &ClassMap,
    ) -> Self {
        let scans = scans
            .iter()
            .zip(labels)
            .map(|(scan, (semantic, instance))| {
                let points: Vec<Vec3> = scan.points.iter().map(|p| p.map(f64::from)).collect();
                let is_member =
                    |i: usize| instance[i] != 0 && semantic[i] != IGNORE && class_map.is_thing(semantic[i]);
                let center = centroids(&points, instance, is_member);
                ScanTruth {
                    semantic: semantic.clone(),
                    instance: instance.clone(),
                    center,
                }
            })
            .collect();
        Self {
            scans,
            objects: Vec::new(),
        }
    }
}

/// Per-point center: the centroid of the point's instance when `is_member`,
/// else the point itself.
fn centroids(points: &[Vec3], instance: &[u32], is_member: impl Fn(usize) -> bool) -> Vec<Vec3> {
    let mut sums: std::collections::BTreeMap<u32, ([f64; 3], usize)> = Default::default();
    for (i, p) in points.iter().enumerate() {
        if is_member(i) {
            let e = sums.entry(instance[i]).or_insert(([0.0; 3], 0));
            for a in 0..3 {
                e.0[a] += p[a];
            }
            e.1 += 1;
        }
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if is_member(i) {
                let (s, n) = sums[&instance[i]];
                [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]
            } else {
                *p
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub scans: Vec<PointCloudScan>,
    pub lidar_poses: Vec<RigidTransform>,
    pub truth: GroundTruth,
    pub boxes: Vec<BoxObstacle>,
    pub calib: CalibRecord,
}

/// KITTI-style lidar-to-camera extrinsics used for written datasets.
pub fn default_calib() -> CalibRecord {
    CalibRecord {
        rotation: nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
        translation: nalgebra::Vector3::new(-0.004_069_766, -0.076_315_72, -0.271_781),
    }
}

fn ego_poses(config: &SceneConfig) -> Vec<RigidTransform> {
    let wp = &config.waypoints;
    let seg_len: Vec<f64> = wp
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect();
    let total: f64 = seg_len.iter().sum();
    (0..config.n_scans)
        .map(|k| {
            let frac = if config.n_scans > 1 {
                k as f64 / (config.n_scans - 1) as f64
            } else {
                0.0
            };
            let mut s = frac * total;
            let (mut pos, mut yaw) = (wp[0], 0.0);
            for (i, &len) in seg_len.iter().enumerate() {
                let (a, b) = (wp[i], wp[i + 1]);
                if len > 0.0 {
                    yaw = (b[1] - a[1]).atan2(b[0] - a[0]);
                }
                if s <= len || i + 1 == seg_len.len() {
                    let u = if len > 0.0 { (s / len).min(1.0) } else { 0.0 };
                    pos = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
                    break;
                }
                s -= len;
            }
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), yaw);
            RigidTransform::new(
                rot.into_inner(),
                nalgebra::Vector3::new(pos[0], pos[1], SENSOR_HEIGHT_M),
            )
        })
        .collect()
}

fn unit_sphere(r: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v: Vec3 = [r.sample(StandardNormal), r.sample(StandardNormal), r.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn object_point_count(config: &SceneConfig, radius: f64) -> usize {
    ((config.object_density * 4.0 * PI * radius * radius).round() as usize).max(30)
}

fn sample_box_surface(b: &BoxObstacle, r: &mut ChaCha8Rng) -> Vec3 {
    let e = [b.max[0] - b.min[0], b.max[1] - b.min[1], b.max[2] - b.min[2]];
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let mut u = r.gen::<f64>() * total;
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if u < 2.0 * area {
            axis = a;
            break;
        }
        u -= 2.0 * area;
    }
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = b.min[a] + r.gen::<f64>() * e[a];
    }
    p[axis] = if r.gen::<bool>() { b.min[axis] } else { b.max[axis] };
    p
}

fn box_area(b: &BoxObstacle) -> f64 {
    let e = [b.max[0] - b.min[0], b.max[1] - b.min[1], b.max[2] - b.min[2]];
    2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
}

fn ground_class(y: f64) -> TrainId {
    // road | sidewalk | terrain bands across the world y axis
    match y.abs() {
        a if a < 4.0 => 8,
        a if a < 6.0 => 10,
        _ => 16,
    }
}

fn layout(config: &SceneConfig) -> Result<(Vec<BoxObstacle>, Vec<ObjectTrack>), SynthError> {
    let mut r = rng(config.seed, STREAM_LAYOUT);
    let origin = config.waypoints[0];
    let times: Vec<f64> = (0..config.n_scans).map(|k| k as f64 * config.scan_period).collect();
    let far = config.ground_radius * 0.8;

    // building, fence, vegetation, trunk, pole
    const BOX_CLASSES: [TrainId; 5] = [12, 13, 14, 15, 17];
    let mut boxes = Vec::with_capacity(config.n_boxes);
    for b in 0..config.n_boxes {
        let class = BOX_CLASSES[b % BOX_CLASSES.len()];
        let angle = r.gen::<f64>() * 2.0 * PI;
        let dist = 10.0 + r.gen::<f64>() * (far - 10.0).max(0.0);
        let (sx, sy, sz) = match class {
            17 => (0.3, 0.3, 4.0),
            15 => (0.5, 0.5, 3.0),
            _ => (
                1.0 + 4.0 * r.gen::<f64>(),
                1.0 + 4.0 * r.gen::<f64>(),
                1.5 + 4.5 * r.gen::<f64>(),
            ),
        };
        let cx = origin[0] + dist * angle.cos();
        let cy = origin[1] + dist * angle.sin();
        boxes.push(BoxObstacle {
            class,
            min: [cx - sx / 2.0, cy - sy / 2.0, 0.0],
            max: [cx + sx / 2.0, cy + sy / 2.0, sz],
        });
    }

    let total_weight: f64 = config.object_class_mix.iter().map(|(_, w)| w.max(0.0)).sum();
    let mut objects: Vec<ObjectTrack> = Vec::with_capacity(config.n_objects);
    for i in 0..config.n_objects {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut pick = r.gen::<f64>() * total_weight;
            let mut class = config.object_class_mix[0].0;
            for &(c, w) in &config.object_class_mix {
                if pick < w.max(0.0) {
                    class = c;
                    break;
                }
                pick -= w.max(0.0);
            }
            let (r0, r1) = config.radius_range;
            let radius = r0 + r.gen::<f64>() * (r1 - r0);
            let (s0, s1) = config.speed_range;
            let speed = s0 + r.gen::<f64>() * (s1 - s0);
            let heading = r.gen::<f64>() * 2.0 * PI;
            let angle = r.gen::<f64>() * 2.0 * PI;
            let dist = 5.0 + r.gen::<f64>() * (config.ground_radius * 0.6 - 5.0).max(0.0);
            let track = ObjectTrack {
                instance_id: i as u32 + 1,
                class,
                radius,
                start: [
                    origin[0] + dist * angle.cos(),
                    origin[1] + dist * angle.sin(),
                    radius + config.clearance,
                ],
                velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
                body: Vec::new(),
            };
            if !config.separable || placement_ok(config, &track, &objects, &boxes, &times) {
                placed = Some(track);
                break;
            }
        }
        let mut track = placed.ok_or_else(|| {
            SynthError::InfeasibleLayout(format!(
                "could not place object {} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                i + 1
            ))
        })?;
        let m = object_point_count(config, track.radius);
        track.body = (0..m)
            .map(|_| unit_sphere(&mut r).map(|v| v * track.radius))
            .collect();
        objects.push(track);
    }
    Ok((boxes, objects))
}

fn placement_ok(
    config: &SceneConfig,
    cand: &ObjectTrack,
    objects: &[ObjectTrack],
    boxes: &[BoxObstacle],
    times: &[f64],
) -> bool {
    for other in objects {
        let need = config.min_gap + cand.radius + other.radius;
        for &ta in times {
            let a = cand.center_at(ta);
            for &tb in times {
                let b = other.center_at(tb);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                if d <= need {
                    return false;
                }
            }
        }
    }
    times.iter().all(|&t| {
        let c = cand.center_at(t);
        boxes
            .iter()
            .all(|b| b.distance_to(&c) > cand.radius + BOX_CLEARANCE_M)
    })
}

/// Generates a scene. Identical configs give identical scenes.
pub fn generate(config: &SceneConfig) -> Result<Scene, SynthError> {
    let (boxes, objects) = layout(config)?;
    let object_points: usize = objects.iter().map(|o| o.body.len()).sum();
    if object_points > config.points_per_scan {
        return Err(SynthError::InfeasibleLayout(format!(
            "objects need {object_points} points, budget is {}",
            config.points_per_scan
        )));
    }
    let stuff_points = config.points_per_scan - object_points;
    let box_budget = if boxes.is_empty() { 0 } else { stuff_points * 3 / 10 };
    let areas: Vec<f64> = boxes.iter().map(box_area).collect();
    let area_sum: f64 = areas.iter().sum();
    let box_counts: Vec<usize> = areas
        .iter()
        .map(|a| (box_budget as f64 * a / area_sum).floor() as usize)
        .collect();
    let ground_points = stuff_points - box_counts.iter().sum::<usize>();

    let poses = ego_poses(config);
    let mut scans = Vec::with_capacity(config.n_scans);
    let mut truths = Vec::with_capacity(config.n_scans);
    for (k, pose) in poses.iter().enumerate() {
        let mut r = rng(config.seed, STREAM_SCAN + k as u64);
        let to_sensor = pose.inverse();
        let t = k as f64 * config.scan_period;
        let mut items: Vec<([f32; 3], TrainId, u32)> = Vec::with_capacity(config.points_per_scan);
        let mut push = |world: Vec3, class: TrainId, id: u32| {
            let s = to_sensor.apply_array(world);
            items.push(([s[0] as f32, s[1] as f32, s[2] as f32], class, id));
        };
        for o in &objects {
            let c = o.center_at(t);
            for b in &o.body {
                push([c[0] + b[0], c[1] + b[1], c[2] + b[2]], o.class, o.instance_id);
            }
        }
        let ego = pose.translation;
        for _ in 0..ground_points {
            let rad = config.ground_radius * r.gen::<f64>().sqrt();
            let th = r.gen::<f64>() * 2.0 * PI;
            let (x, y) = (ego.x + rad * th.cos(), ego.y + rad * th.sin());
            push([x, y, 0.0], ground_class(y), 0);
        }
        for (b, &n) in boxes.iter().zip(&box_counts) {
            for _ in 0..n {
                let p = sample_box_surface(b, &mut r);
                push(p, b.class, 0);
            }
        }
        items.shuffle(&mut r);
        let feature: Vec<f32> = (0..items.len()).map(|_| r.gen::<f32>()).collect();

        let points: Vec<[f32; 3]> = items.iter().map(|it| it.0).collect();
        let semantic: Vec<TrainId> = items.iter().map(|it| it.1).collect();
        let instance: Vec<u32> = items.iter().map(|it| it.2).collect();
        let as_f64: Vec<Vec3> = points.iter().map(|p| p.map(f64::from)).collect();
        let center = centroids(&as_f64, &instance, |i| instance[i] != 0);
        scans.push(PointCloudScan {
            points,
            feature,
            scan_index: k,
        });
        truths.push(ScanTruth {
            semantic,
            instance,
            center,
        });
    }
    Ok(Scene {
        scans,
        lidar_poses: poses,
        truth: GroundTruth {
            scans: truths,
            objects,
        },
        boxes,
        calib: default_calib(),
    })
}

/// Writes `velodyne/`, `labels/`, `poses.txt` and `calib.txt` under `dir`.
pub fn write_sequence(dir: &Path, scene: &Scene, class_map: &ClassMap) -> Result<(), SynthError> {
    let layout = SequenceLayout::new(dir);
    for (scan, truth) in scene.scans.iter().zip(&scene.truth.scans) {
        formats::write_scan(layout.scan(scan.scan_index), scan)?;
        let labels: Vec<LabelRecord> = truth
            .semantic
            .iter()
            .zip(&truth.instance)
            .map(|(&s, &i)| LabelRecord::new(class_map.to_raw(s), i as u16))
            .collect();
        formats::write_labels(layout.label(scan.scan_index), &labels)?;
    }
    let poses: Vec<_> = scene
        .lidar_poses
        .iter()
        .map(|p| camera_pose_from_lidar_pose(p, &scene.calib))
        .collect();
    formats::write_poses(layout.poses(), &poses)?;
    formats::write_calib(layout.calib(), &scene.calib)?;
    info!(
        "wrote {} scans ({} points each) to {}",
        scene.scans.len(),
        scene.scans.first().map_or(0, |s| s.len()),
        dir.display()
    );
    Ok(())
}

/// Labels with each point independently replaced, with probability `flip_prob`,
/// by a uniformly chosen different class. Ignored points stay ignored.
pub fn noisy_labels(truth: &ScanTruth, scan_index: usize, flip_prob: f64, seed: u64, num_classes: usize) -> Vec<TrainId> {
    let mut r = rng(seed, STREAM_FLIP + scan_index as u64);
    truth
        .semantic
        .iter()
        .map(|&label| {
            let u: f64 = r.gen();
            if label == IGNORE || u >= flip_prob || num_classes < 2 {
                return label;
            }
            let other = r.gen_range(0..num_classes - 1) as TrainId;
            if other >= label {
                other + 1
            } else {
                other
            }
        })
        .collect()
}

/// One-hot priors from flipped ground-truth labels, one per scan.
pub fn noisy_semantics(gt: &GroundTruth, flip_prob: f64, seed: u64, num_classes: usize) -> Vec<SemanticPrior> {
    gt.scans
        .iter()
        .enumerate()
        .map(|(k, t)| {
            encode_one_hot(&noisy_labels(t, k, flip_prob, seed, num_classes), num_classes)
                .expect("ground-truth labels are in range")
        })
        .collect()
}

/// Confidence rows whose argmax is the given label.
pub fn confidence_prior(labels: &[TrainId], scan_index: usize, seed: u64, num_classes: usize) -> SemanticPrior {
    let mut r = rng(seed, STREAM_CONFIDENCE + scan_index as u64);
    let mut raw = Vec::with_capacity(labels.len() * num_classes);
    for &label in labels {
        for k in 0..num_classes {
            let v: f64 = r.gen::<f64>() * 0.5;
            raw.push(if label != IGNORE && k == label as usize { 1.0 } else { v });
        }
    }
    normalize_confidences(&raw, num_classes).expect("rows are positive")
}

fn offsets_for(gt: &GroundTruth, cloud: &Aggregated4DCloud, noise: Option<(f64, u64)>) -> OffsetField {
    let mut offsets = Vec::with_capacity(cloud.len());
    for k in 0..cloud.n_scans {
        let scan = cloud.window.start + k;
        let truth = &gt.scans[scan];
        let to_ref = &cloud.scan_transforms[k];
        let range = cloud.scan_range(k);
        let mut r = noise.map(|(_, seed)| rng(seed, STREAM_OFFSET + scan as u64));
        for (j, idx) in range.enumerate() {
            let p = cloud.positions[idx];
            let mut d = if truth.instance[j] != 0 {
                let c = to_ref.apply_array(truth.center[j]);
                [c[0] - p[0], c[1] - p[1], c[2] - p[2]]
            } else {
                [0.0; 3]
            };
            if let (Some(r), Some((sigma, _))) = (r.as_mut(), noise) {
                let e: Vec3 = [
                    sigma * r.sample::<f64, _>(StandardNormal),
                    sigma * r.sample::<f64, _>(StandardNormal),
                    sigma * r.sample::<f64, _>(StandardNormal),
                ];
                let e = to_ref.rotate(e);
                d = [d[0] + e[0], d[1] + e[1], d[2] + e[2]];
            }
            offsets.push(d);
        }
    }
    OffsetField { offsets }
}

/// `Δp = c_gt − p` for thing points, zero for stuff, in the window frame.
pub fn oracle_offsets(gt: &GroundTruth, cloud: &Aggregated4DCloud) -> OffsetField {
    offsets_for(gt, cloud, None)
}

/// Oracle offsets plus isotropic Gaussian noise (per-axis std `sigma`).
/// Noise is drawn per scan, so a scan gets the same noise in every window.
pub fn noisy_offsets(gt: &GroundTruth, cloud: &Aggregated4DCloud, sigma: f64, seed: u64) -> OffsetField {
    offsets_for(gt, cloud, Some((sigma, seed)))
}

/// Prediction source backed by ground truth with controllable corruption.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    pub truth: std::sync::Arc<GroundTruth>,
    pub prior_kind: PriorKind,
    pub flip_prob: f64,
    pub offset_sigma: f64,
    pub seed: u64,
    pub num_classes: usize,
}

impl OracleProvider {
    pub fn perfect(truth: std::sync::Arc<GroundTruth>, num_classes: usize) -> Self {
        Self {
            truth,
            prior_kind: PriorKind::OneHot,
            flip_prob: 0.0,
            offset_sigma: 0.0,
            seed: 0,
            num_classes,
        }
    }
}

impl PredictionSource for OracleProvider {
    fn semantic_prior(&self, scan: usize, n_points: usize) -> Result<SemanticPrior, SourceError> {
        let truth = self.truth.scans.get(scan).ok_or(SourceError::Missing { scan })?;
        if truth.semantic.len() != n_points {
            return Err(SourceError::Missing { scan });
        }
        let labels = noisy_labels(truth, scan, self.flip_prob, self.seed, self.num_classes);
        Ok(match self.prior_kind {
            PriorKind::OneHot => encode_one_hot(&labels, self.num_classes)
                .map_err(|source| SourceError::Prior { scan, source })?,
            PriorKind::Confidence => confidence_prior(&labels, scan, self.seed, self.num_classes),
        })
    }

    fn offsets(&self, cloud: &Aggregated4DCloud) -> Result<OffsetField, SourceError> {
        if let Some(scan) = (cloud.window.start..cloud.window.end()).find(|&s| s >= self.truth.scans.len()) {
            return Err(SourceError::Missing { scan });
        }
        Ok(if self.offset_sigma > 0.0 {
            noisy_offsets(&self.truth, cloud, self.offset_sigma, self.seed)
        } else {
            oracle_offsets(&self.truth, cloud)
        })
    }
}
