//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the report is always printed.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::Rng;

use dpls_core::formats::{self, CalibRecord, LabelRecord, PointCloudScan};
use dpls_core::geometry::{aggregate, camera_pose_from_lidar_pose, lidar_pose_from_camera_pose, transform_points, RigidTransform, Window};
use dpls_core::lstq::{self, ScanLabels};
use dpls_core::pipeline::{self, RunParams};
use dpls_core::proposal::{dbscan, farthest_point_sample, huber_center_loss, ProposalParams};
use dpls_core::semantic::{argmax_label, encode_one_hot, majority_label, ClassMap, PriorKind, TrainId, IGNORE};
use dpls_core::synth::{self, OracleProvider, SceneConfig};

const CASES: u64 = 1000;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn run(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| outcome(false, "panicked"));
    let elapsed = t0.elapsed();
    let in_time = limit.map_or(true, |l| elapsed < l);
    let ok = result.ok && in_time;
    let limit_text = limit.map_or(String::new(), |l| format!(" (limit {:.0} s)", l.as_secs_f64()));
    println!(
        "[{}] {id}. {name}: {}; {:.2} s{limit_text}{}",
        if ok { "PASS" } else { "FAIL" },
        result.detail,
        elapsed.as_secs_f64(),
        if in_time { "" } else { " OVER TIME" }
    );
    ok
}

fn map() -> ClassMap {
    ClassMap::semantic_kitti()
}

fn lstq_arithmetic() -> Outcome {
    // (S_assoc %, S_cls %, printed LSTQ %)
    let rows = [("baseline", 65.50, 51.38, 58.01), ("one-hot", 73.00, 66.17, 69.50), ("N=4", 74.87, 66.36, 70.49)];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, s_assoc, s_cls, printed) in rows {
        let v = lstq::lstq(s_cls / 100.0, s_assoc / 100.0) * 100.0;
        worst = worst.max((v - printed).abs());
        parts.push(format!("{name} {v:.4}"));
    }
    // the shipped fixture file reproduces its printed rows as well
    let fixture = pipeline::parse_score_fixture("fixture", include_str!("../data/published_scores.txt")).unwrap();
    for (row, v) in pipeline::recompute_scores(&fixture) {
        worst = worst.max((v - row.lstq.unwrap()).abs());
    }
    outcome(worst <= 0.005, format!("{}; max |diff| {worst:.4} <= 0.005", parts.join(", ")))
}

fn perfect_oracle() -> Outcome {
    let map = map();
    let config = SceneConfig::reference(&map);
    let scene = synth::generate(&config).unwrap();
    let objects = scene.truth.objects.len();
    let gt = scene.truth.scan_labels();
    let source = OracleProvider::perfect(Arc::new(scene.truth.clone()), map.num_classes());
    let mut ok = config.n_scans >= 4 && objects >= 5 && config.points_per_scan >= 20_000;
    let mut parts = vec![format!("{} scans, {objects} objects, {} pts/scan", config.n_scans, config.points_per_scan)];
    for n in [2, 4] {
        let params = RunParams {
            window: n,
            stride: n - 1,
            proposal: ProposalParams::default(),
            threads: 1,
        };
        let (pred, _) = common::segment_scene(&scene, &source, &params, &map);
        let r = lstq::evaluate_sequence(&pred, &gt, &map).unwrap();
        ok &= r.lstq >= 0.999 && r.s_assoc >= 0.999 && r.s_cls >= 0.999;
        parts.push(format!("N={n}: LSTQ {:.4} S_assoc {:.4} S_cls {:.4}", r.lstq, r.s_assoc, r.s_cls));
    }
    outcome(ok, parts.join("; "))
}

fn oracle_suites() -> Outcome {
    let mut failures = Vec::new();
    let mut r = common::rng(0x5eed);
    for case in 0..CASES {
        let n = r.gen_range(1..=10);
        let pts = common::grid_points(&mut r, n, 3, 0.5);
        let k = r.gen_range(1..=10);
        if farthest_point_sample(&pts, k).unwrap() != common::fps_exhaustive(&pts, k) {
            failures.push(format!("fps case {case}"));
        }
    }
    for case in 0..CASES {
        let n = r.gen_range(0..=200);
        let items: Vec<Vec<f64>> = common::grid_points(&mut r, n, 8, 0.25).into_iter().map(|p| p.to_vec()).collect();
        let eps = r.gen_range(1..=6) as f64 * 0.25;
        let min_pts = r.gen_range(1..=5);
        let got = common::partition(&dbscan(&items, eps, min_pts));
        if got != common::partition(&common::dbscan_reference(&items, eps, min_pts)) {
            failures.push(format!("dbscan case {case}"));
        }
    }
    let map = map();
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (pred, gt) = common::random_labels(&mut r, 3, 50, 4, 19);
        let got = lstq::s_assoc(&pred, &gt, &map).unwrap();
        worst = worst.max((got - common::s_assoc_rational(&pred, &gt, |c| map.is_thing(c))).abs());
    }
    if worst > 1e-12 {
        failures.push(format!("s_assoc max error {worst:e}"));
    }
    for case in 0..CASES {
        let n = r.gen_range(0..40);
        let ls: Vec<TrainId> = (0..n).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..6) }).collect();
        if majority_label(ls.iter().copied()).ok() != common::majority_histogram(&ls) {
            failures.push(format!("majority case {case}"));
        }
        let row: Vec<f64> = (0..r.gen_range(1..20)).map(|_| r.gen_range(0..4) as f64).collect();
        if argmax_label(&row) as usize != common::argmax_scan(&row) {
            failures.push(format!("argmax case {case}"));
        }
    }
    let detail = format!(
        "{CASES} cases each: fps n<=10, dbscan n<=200, s_assoc <=50 pts (max err {worst:.1e}), majority/argmax; {} mismatches",
        failures.len()
    );
    outcome(failures.is_empty(), if failures.is_empty() { detail } else { format!("{detail}: {}", failures.join(", ")) })
}

fn random_rigid(r: &mut impl Rng) -> RigidTransform {
    let a: [f64; 3] = [0, 1, 2].map(|_| r.gen_range(-3.2..3.2));
    let t: [f64; 3] = [0, 1, 2].map(|_| r.gen_range(-100.0..100.0));
    RigidTransform::new(
        Rotation3::from_euler_angles(a[0], a[1], a[2]).into_inner(),
        Vector3::new(t[0], t[1], t[2]),
    )
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

fn geometry() -> Outcome {
    let mut r = common::rng(4);
    let dir = tempfile::tempdir().unwrap();
    let (mut pose_err, mut static_err, mut rigid_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for case in 0..CASES {
        // lidar pose -> camera pose -> poses.txt -> lidar pose
        let pose = random_rigid(&mut r);
        let tr = random_rigid(&mut r);
        let calib = CalibRecord { rotation: tr.rotation, translation: tr.translation };
        let path = dir.path().join("poses.txt");
        formats::write_poses(&path, &[camera_pose_from_lidar_pose(&pose, &calib)]).unwrap();
        let back = lidar_pose_from_camera_pose(&formats::read_poses(&path).unwrap()[0], &calib);
        for _ in 0..4 {
            let p: [f64; 3] = [0, 1, 2].map(|_| r.gen_range(-80.0..80.0));
            pose_err = pose_err.max(dist(&pose.apply_array(p), &back.apply_array(p)));
        }

        // a static world point seen from two poses lands on itself; quarter-turn
        // yaws and dyadic coordinates keep the stored f32 values exact
        let poses: Vec<RigidTransform> = (0..2)
            .map(|_| {
                let yaw = r.gen_range(0..4) as f64 * std::f64::consts::FRAC_PI_2;
                let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner().map(f64::round);
                let t = [0, 1, 2].map(|_| r.gen_range(-800..800) as f64 / 8.0);
                RigidTransform::new(rot, Vector3::new(t[0], t[1], t[2]))
            })
            .collect();
        let world: Vec<[f64; 3]> = (0..8).map(|_| [0, 1, 2].map(|_| r.gen_range(-4096..4096) as f64 / 64.0)).collect();
        let scans: Vec<PointCloudScan> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let inv = p.inverse();
                PointCloudScan {
                    points: world.iter().map(|w| inv.apply_array(*w).map(|v| v as f32)).collect(),
                    feature: vec![0.0; world.len()],
                    scan_index: case as usize * 2 + k,
                }
            })
            .collect();
        let priors: Vec<_> = scans.iter().map(|s| encode_one_hot(&vec![0; s.len()], 19).unwrap()).collect();
        let cloud = aggregate(&scans, &poses, &priors, Window::new(0, 2)).unwrap();
        for i in 0..world.len() {
            static_err = static_err.max(dist(&cloud.positions[i], &cloud.positions[world.len() + i]));
        }

        let t = random_rigid(&mut r);
        let pts: Vec<[f64; 3]> = (0..6).map(|_| [0, 1, 2].map(|_| r.gen_range(-50.0..50.0))).collect();
        let moved = transform_points(&pts, &t);
        for i in 0..pts.len() {
            for j in 0..i {
                rigid_err = rigid_err.max((dist(&pts[i], &pts[j]) - dist(&moved[i], &moved[j])).abs());
            }
        }
    }
    outcome(
        pose_err < 1e-6 && static_err < 1e-6 && rigid_err < 1e-9,
        format!("pose round trip {pose_err:.1e} m (<1e-6), static coincidence {static_err:.1e} m (<1e-6), rigid invariance {rigid_err:.1e} (<1e-9)"),
    )
}

fn io_round_trips() -> Outcome {
    let mut r = common::rng(5);
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = 0;
    for case in 0..CASES {
        let n = r.gen_range(0..200);
        let mut scan_bytes = Vec::with_capacity(16 * n);
        for _ in 0..4 * n {
            let v = f32::from_bits(r.gen::<u32>());
            let v = if v.is_finite() { v } else { r.gen::<f32>() };
            scan_bytes.extend_from_slice(&v.to_le_bytes());
        }
        let scan_path = dir.path().join("s.bin");
        std::fs::write(&scan_path, &scan_bytes).unwrap();
        let scan = formats::read_scan(&scan_path, case as usize).unwrap();
        formats::write_scan(&scan_path, &scan).unwrap();
        mismatches += usize::from(std::fs::read(&scan_path).unwrap() != scan_bytes);

        let labels: Vec<LabelRecord> = (0..n).map(|_| LabelRecord::unpack(r.gen())).collect();
        let label_path = dir.path().join("l.label");
        formats::write_labels(&label_path, &labels).unwrap();
        let bytes = std::fs::read(&label_path).unwrap();
        let back = formats::read_labels(&label_path, n).unwrap();
        formats::write_labels(&label_path, &back).unwrap();
        mismatches += usize::from(std::fs::read(&label_path).unwrap() != bytes || back != labels);

        let preds: Vec<(u32, u32)> = (0..n).map(|_| (r.gen_range(0..=0xffff), r.gen_range(0..=0xffff))).collect();
        let pred_path = dir.path().join("p.label");
        formats::write_predictions(&pred_path, &preds).unwrap();
        let bytes = std::fs::read(&pred_path).unwrap();
        let back: Vec<(u32, u32)> = formats::read_labels(&pred_path, n)
            .unwrap()
            .iter()
            .map(|l| (u32::from(l.semantic_raw), u32::from(l.instance_id)))
            .collect();
        formats::write_predictions(&pred_path, &back).unwrap();
        mismatches += usize::from(std::fs::read(&pred_path).unwrap() != bytes || back != preds);
    }
    outcome(mismatches == 0, format!("{CASES} fixtures each for scan, label, prediction files; {mismatches} mismatches"))
}

fn masking() -> Outcome {
    let mut r = common::rng(6);
    let mut changed = 0;
    for _ in 0..CASES {
        let n = r.gen_range(0..30);
        let mut pred: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| r.gen_range(-20.0..20.0))).collect();
        let mut gt: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| r.gen_range(-20.0..20.0))).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
        let delta = r.gen_range(0.1..3.0);
        let before = huber_center_loss(&pred, &gt, &mask, delta).unwrap();
        for _ in 0..r.gen_range(1..30) {
            pred.push([0, 1, 2].map(|_| r.gen_range(-1e3..1e3)));
            gt.push([0, 1, 2].map(|_| r.gen_range(-1e3..1e3)));
            mask.push(false);
        }
        let after = huber_center_loss(&pred, &gt, &mask, delta).unwrap();
        changed += usize::from(before.value.to_bits() != after.value.to_bits());
    }
    outcome(changed == 0, format!("{CASES} cases with appended stuff points; {changed} changed the loss"))
}

fn ablation_direction() -> Outcome {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let gt = scene.truth.scan_labels();
    let truth = Arc::new(scene.truth.clone());
    let params = RunParams {
        window: 2,
        stride: 1,
        proposal: ProposalParams::default(),
        threads: 4,
    };
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let score = |rho: f64| {
            let source = OracleProvider {
                truth: Arc::clone(&truth),
                prior_kind: PriorKind::OneHot,
                flip_prob: rho,
                offset_sigma: 0.2,
                seed,
                num_classes: map.num_classes(),
            };
            let (pred, _) = common::segment_scene(&scene, &source, &params, &map);
            lstq::evaluate_sequence(&pred, &gt, &map).unwrap().lstq
        };
        let (clean, noisy) = (score(0.0), score(0.5));
        wins += usize::from(clean > noisy);
        parts.push(format!("seed {seed}: {:.2} > {:.2}", clean * 100.0, noisy * 100.0));
    }
    outcome(wins == 5, format!("sigma 0.2 m, oracle vs rho 0.5 LSTQ%: {}; {wins}/5", parts.join(", ")))
}

fn determinism_and_throughput() -> Outcome {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let source = OracleProvider {
        flip_prob: 0.1,
        offset_sigma: 0.2,
        seed: 1,
        ..OracleProvider::perfect(Arc::new(scene.truth.clone()), map.num_classes())
    };
    let mut outputs: Vec<Vec<ScanLabels>> = Vec::new();
    let mut rate = 0.0;
    for threads in [1, 4] {
        let params = RunParams {
            window: 2,
            stride: 1,
            proposal: ProposalParams::default(),
            threads,
        };
        let (pred, summary) = common::segment_scene(&scene, &source, &params, &map);
        if threads == 1 {
            rate = summary.group_stage_throughput();
        }
        outputs.push(pred);
    }
    // byte-level comparison of the encoded prediction files
    let encode = |o: &[ScanLabels]| -> Vec<Vec<u8>> {
        o.iter()
            .map(|s| {
                let pairs: Vec<(u32, u32)> = s.semantic.iter().zip(&s.instance).map(|(&a, &b)| (u32::from(map.to_raw(a)), b)).collect();
                formats::encode_predictions(&pairs).unwrap()
            })
            .collect()
    };
    let same = encode(&outputs[0]) == encode(&outputs[1]);
    let floor = 1e6;
    if rate < floor {
        eprintln!(
            "warning: shift+fps+group throughput {:.2} Mpts/s is below the 1 Mpts/s floor (build profile: {})",
            rate / 1e6,
            if cfg!(debug_assertions) { "debug" } else { "release" }
        );
    }
    outcome(
        same,
        format!(
            "threads 1 and 4 {}; shift+fps+group {:.2} Mpts/s ({} 1 Mpts/s floor, warning only)",
            if same { "byte-identical" } else { "DIFFER" },
            rate / 1e6,
            if rate >= floor { "meets" } else { "below" }
        ),
    )
}

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let results = [
        run(1, "LSTQ arithmetic on published rows", Some(s(1)), lstq_arithmetic),
        run(2, "perfect-oracle end-to-end", Some(s(30)), perfect_oracle),
        run(3, "oracle equivalence suites", Some(s(60)), oracle_suites),
        run(4, "geometry", None, geometry),
        run(5, "I/O round trips", None, io_round_trips),
        run(6, "loss masking", None, masking),
        run(7, "ablation direction", Some(s(120)), ablation_direction),
        run(8, "determinism and throughput", None, determinism_and_throughput),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
