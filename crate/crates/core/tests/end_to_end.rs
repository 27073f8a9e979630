mod common;

use std::sync::Arc;

use dpls_core::config::KeyValues;
use dpls_core::formats::{self, SequenceLayout};
use dpls_core::geometry::{aggregate, Window};
use dpls_core::lstq;
use dpls_core::pipeline::{
    self, cmd_evaluate, cmd_segment, cmd_synth, sequence_dir, MemoryStore, PipelineConfig, PipelineError, RunParams,
};
use dpls_core::proposal::{huber_center_loss, shift_to_centers, ProposalParams};
use dpls_core::semantic::{encode_one_hot, ClassMap, PriorKind};
use dpls_core::synth::{self, OracleProvider, SceneConfig};

fn map() -> ClassMap {
    ClassMap::semantic_kitti()
}

fn params(window: usize, stride: usize, threads: usize) -> RunParams {
    RunParams {
        window,
        stride,
        proposal: ProposalParams::default(),
        threads,
    }
}

fn oracle(scene: &synth::Scene) -> OracleProvider {
    OracleProvider::perfect(Arc::new(scene.truth.clone()), 19)
}

#[test]
fn oracle_pipeline_reproduces_ground_truth() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let gt = scene.truth.scan_labels();
    for (n, stride) in [(2, 1), (4, 3), (3, 2)] {
        let (pred, summary) = common::segment_scene(&scene, &oracle(&scene), &params(n, stride, 2), &map);
        assert!(common::same_up_to_id_bijection(&pred, &gt), "N={n}");
        assert_eq!(summary.instances as usize, scene.truth.objects.len());
        let report = lstq::evaluate_sequence(&pred, &gt, &map).unwrap();
        assert_eq!(report.lstq, 1.0);
    }
}

#[test]
fn persistent_object_keeps_one_id_across_windows() {
    let map = map();
    let config = SceneConfig {
        n_scans: 5,
        n_objects: 1,
        points_per_scan: 6000,
        ..SceneConfig::reference(&map)
    };
    let scene = synth::generate(&config).unwrap();
    let (pred, summary) = common::segment_scene(&scene, &oracle(&scene), &params(3, 1, 1), &map);
    assert_eq!(summary.windows.len(), 3);
    let mut ids = std::collections::BTreeSet::new();
    for (p, t) in pred.iter().zip(&scene.truth.scans) {
        for (a, b) in p.instance.iter().zip(&t.instance) {
            assert_eq!(*a != 0, *b == 1);
            if *a != 0 {
                ids.insert(*a);
            }
        }
    }
    assert_eq!(ids.len(), 1);
    assert_eq!(summary.instances, 1);
}

#[test]
fn stride_equal_to_window_uses_fresh_ids() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let gt = scene.truth.scan_labels();
    let (pred, summary) = common::segment_scene(&scene, &oracle(&scene), &params(1, 1, 2), &map);
    assert!(summary.stitches[1..].iter().all(|r| r.no_overlap && r.matched == 0));
    let report = lstq::evaluate_sequence(&pred, &gt, &map).unwrap();
    assert_eq!(report.s_cls, 1.0);
    // every object is split into one piece per scan
    assert!((report.s_assoc - 0.25).abs() < 0.01, "{}", report.s_assoc);
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let source = OracleProvider {
        flip_prob: 0.05,
        offset_sigma: 0.2,
        seed: 3,
        ..oracle(&scene)
    };
    let (a, _) = common::segment_scene(&scene, &source, &params(2, 1, 1), &map);
    let (b, _) = common::segment_scene(&scene, &source, &params(2, 1, 4), &map);
    assert_eq!(a, b);
}

#[test]
fn file_sources_match_oracle_sources() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let seq = sequence_dir(&root, "00");
    synth::write_sequence(&seq, &scene, &map).unwrap();
    // predictor outputs: labels as one-hot source and sensor-frame offsets
    let pred_root = dir.path().join("pred");
    let pred_seq = sequence_dir(&pred_root, "00");
    for (k, (scan, t)) in scene.scans.iter().zip(&scene.truth.scans).enumerate() {
        let name = formats::scan_file_name(k, "label");
        std::fs::create_dir_all(pred_seq.join("semantic")).unwrap();
        std::fs::copy(SequenceLayout::new(&seq).label(k), pred_seq.join("semantic").join(name)).unwrap();
        let offsets: Vec<f32> = scan
            .points
            .iter()
            .zip(&t.center)
            .zip(&t.instance)
            .flat_map(|((p, c), i)| {
                (0..3).map(move |a| if *i == 0 { 0.0 } else { (c[a] - f64::from(p[a])) as f32 })
            })
            .collect();
        std::fs::create_dir_all(pred_seq.join("offsets")).unwrap();
        formats::write_f32_rows(pred_seq.join("offsets").join(formats::scan_file_name(k, "bin")), &offsets).unwrap();
    }
    let mut kv = KeyValues::default();
    kv.set("dataset_root", root.display());
    kv.set("predictions_root", pred_root.display());
    kv.set("output", dir.path().join("out").display());
    kv.set("window", 2);
    let config = PipelineConfig::from_key_values(&kv).unwrap();
    cmd_segment(&config).unwrap();
    let result = cmd_evaluate(&dir.path().join("out"), &root, &config.sequences, &map, &dir.path().join("eval")).unwrap();
    assert_eq!(result.overall.lstq, 1.0);
    assert!(dir.path().join("eval/lstq.txt").is_file());
    assert!(dir.path().join("eval/lstq_00_table.txt").is_file());

    // removing one offset file names the scan in the error
    std::fs::remove_file(pred_seq.join("offsets").join(formats::scan_file_name(3, "bin"))).unwrap();
    let err = cmd_segment(&config).unwrap_err();
    assert!(matches!(err, PipelineError::Source { .. }));
    assert!(err.to_string().contains("scan 3"), "{err}");
}

#[test]
fn missing_offsets_for_scan_seven_is_reported() {
    let map = map();
    let config = SceneConfig {
        n_scans: 10,
        n_objects: 1,
        points_per_scan: 3000,
        ..SceneConfig::reference(&map)
    };
    let scene = synth::generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let seq = sequence_dir(dir.path(), "00");
    synth::write_sequence(&seq, &scene, &map).unwrap();
    std::fs::create_dir_all(seq.join("semantic")).unwrap();
    std::fs::create_dir_all(seq.join("offsets")).unwrap();
    for k in 0..10 {
        std::fs::copy(SequenceLayout::new(&seq).label(k), seq.join("semantic").join(formats::scan_file_name(k, "label"))).unwrap();
        if k != 7 {
            let zeros = vec![0f32; 3 * scene.scans[k].len()];
            formats::write_f32_rows(seq.join("offsets").join(formats::scan_file_name(k, "bin")), &zeros).unwrap();
        }
    }
    let mut kv = KeyValues::default();
    kv.set("dataset_root", dir.path().display());
    kv.set("output", dir.path().join("out").display());
    let err = cmd_segment(&PipelineConfig::from_key_values(&kv).unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("scan 7") && msg.contains("000007.bin"), "{msg}");
}

#[test]
fn synth_command_is_byte_stable_and_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut kv = KeyValues::parse("ref", synth::REFERENCE_SCENE).unwrap();
        kv.set("dataset_root", dir.path().join(run).display());
        let seq = cmd_synth(&kv).unwrap();
        let layout = SequenceLayout::new(&seq);
        assert_eq!(layout.count_scans(), 4);
        let mut bytes = Vec::new();
        for k in 0..4 {
            bytes.push(std::fs::read(layout.scan(k)).unwrap());
            bytes.push(std::fs::read(layout.label(k)).unwrap());
        }
        bytes.push(std::fs::read(layout.poses()).unwrap());
        bytes.push(std::fs::read(layout.calib()).unwrap());
        outputs.push(bytes);
    }
    assert_eq!(outputs[0], outputs[1]);

    // dataset scored against itself
    let root = dir.path().join("a");
    let result = cmd_evaluate(&root, &root, &["00".to_string()], &map(), &dir.path().join("eval")).unwrap();
    assert_eq!(result.overall.lstq, 1.0);
    assert_eq!(result.overall.s_assoc, 1.0);
    assert_eq!(result.overall.s_cls, 1.0);
}

#[test]
fn generated_files_round_trip_through_readers() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth::write_sequence(dir.path(), &scene, &map).unwrap();
    let store = pipeline::DiskStore::open(dir.path(), "t").unwrap();
    for (k, scan) in scene.scans.iter().enumerate() {
        let back = formats::read_scan(SequenceLayout::new(dir.path()).scan(k), k).unwrap();
        assert_eq!(&back, scan);
        let labels = pipeline::read_ground_truth_labels(dir.path(), 4, &map).unwrap();
        assert_eq!(labels[k].semantic, scene.truth.scans[k].semantic);
        assert_eq!(labels[k].instance, scene.truth.scans[k].instance);
        assert!(dpls_core::pipeline::ScanStore::pose(&store, k).max_abs_diff(&scene.lidar_poses[k]) < 1e-9);
    }
}

#[test]
fn invalid_config_fails_before_io() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("never");
    let mut kv = KeyValues::default();
    kv.set("dataset_root", target.display());
    kv.set("window", 2);
    kv.set("stride", 3);
    assert!(cmd_synth(&kv).is_err());
    assert!(!target.exists());
}

#[test]
fn corrupted_prediction_file_is_an_error() {
    let map = map();
    let config = SceneConfig {
        n_objects: 1,
        points_per_scan: 2000,
        ..SceneConfig::reference(&map)
    };
    let scene = synth::generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let seq = sequence_dir(dir.path(), "00");
    synth::write_sequence(&seq, &scene, &map).unwrap();
    let pred = SequenceLayout::new(&seq).prediction(2);
    std::fs::create_dir_all(pred.parent().unwrap()).unwrap();
    for k in 0..4 {
        std::fs::copy(SequenceLayout::new(&seq).label(k), SequenceLayout::new(&seq).prediction(k)).unwrap();
    }
    let bytes = std::fs::read(&pred).unwrap();
    std::fs::write(&pred, &bytes[..bytes.len() - 5]).unwrap();
    let err = cmd_evaluate(dir.path(), dir.path(), &["00".into()], &map, &dir.path().join("e")).unwrap_err();
    assert!(err.to_string().contains("000002.label"), "{err}");
}

#[test]
fn separable_objects_keep_their_distance() {
    let map = map();
    for seed in 0..5 {
        let config = SceneConfig {
            n_objects: 2,
            points_per_scan: 3000,
            seed,
            ..SceneConfig::reference(&map)
        };
        let scene = synth::generate(&config).unwrap();
        for (scan, t) in scene.scans.iter().zip(&scene.truth.scans) {
            let a: Vec<_> = (0..scan.len()).filter(|&i| t.instance[i] == 1).collect();
            let b: Vec<_> = (0..scan.len()).filter(|&i| t.instance[i] == 2).collect();
            let mut nearest = f64::INFINITY;
            for &i in &a {
                for &j in &b {
                    let d: f64 = (0..3)
                        .map(|k| (f64::from(scan.points[i][k]) - f64::from(scan.points[j][k])).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    nearest = nearest.min(d);
                }
            }
            assert!(nearest > config.min_gap, "seed {seed}: {nearest}");
        }
    }
}

fn world_center(scene: &synth::Scene, k: usize, id: u32) -> [f64; 3] {
    let t = &scene.truth.scans[k];
    let j = t.instance.iter().position(|i| *i == id).unwrap();
    scene.lidar_poses[k].apply_array(t.center[j])
}

#[test]
fn moving_object_centers_follow_trajectory() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let dt = 0.1;
    let mut moving = 0;
    for obj in &scene.truth.objects {
        let a = world_center(&scene, 0, obj.instance_id);
        let b = world_center(&scene, 1, obj.instance_id);
        for k in 0..3 {
            assert!((b[k] - a[k] - obj.velocity[k] * dt).abs() < 1e-4);
        }
        if obj.speed() > 0.5 {
            moving += 1;
        }
    }
    assert!(moving > 0);
}

#[test]
fn oracle_offsets_collapse_objects_and_leave_stuff() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let priors: Vec<_> = scene.truth.scans.iter().map(|t| encode_one_hot(&t.semantic, 19).unwrap()).collect();
    let cloud = aggregate(&scene.scans, &scene.lidar_poses, &priors, Window::new(0, 1)).unwrap();
    let field = synth::oracle_offsets(&scene.truth, &cloud);
    let centers = shift_to_centers(&cloud, &field).unwrap();
    let t = &scene.truth.scans[0];
    for i in 0..cloud.len() {
        if t.instance[i] == 0 {
            assert_eq!(field.offsets[i], [0.0; 3]);
        } else {
            for k in 0..3 {
                assert!((centers[i][k] - t.center[i][k]).abs() < 1e-9);
            }
        }
    }
    assert_eq!(synth::noisy_offsets(&scene.truth, &cloud, 0.0, 1).offsets, field.offsets);
    let mask: Vec<bool> = t.instance.iter().map(|i| *i != 0).collect();
    let exact = huber_center_loss(&centers, &t.center, &mask, 1.0).unwrap();
    // p + (c - p) rounds, so "zero" means zero up to f64 residue
    assert!(exact.value < 1e-20, "{}", exact.value);
    let noisy = shift_to_centers(&cloud, &synth::noisy_offsets(&scene.truth, &cloud, 0.1, 1)).unwrap();
    assert!(huber_center_loss(&noisy, &t.center, &mask, 1.0).unwrap().value > 0.0);
}

#[test]
fn noise_statistics() {
    let map = map();
    let config = SceneConfig {
        n_scans: 1,
        points_per_scan: 100_000,
        n_objects: 40,
        ground_radius: 80.0,
        ..SceneConfig::reference(&map)
    };
    let scene = synth::generate(&config).unwrap();
    let t = &scene.truth.scans[0];
    let flipped = synth::noisy_labels(t, 0, 0.3, 9, 19);
    let rate = flipped.iter().zip(&t.semantic).filter(|(a, b)| a != b).count() as f64 / t.semantic.len() as f64;
    assert!((rate - 0.3).abs() < 0.01, "{rate}");

    let priors = vec![encode_one_hot(&t.semantic, 19).unwrap()];
    let cloud = aggregate(&scene.scans, &scene.lidar_poses, &priors, Window::new(0, 1)).unwrap();
    let clean = synth::oracle_offsets(&scene.truth, &cloud);
    let noisy = synth::noisy_offsets(&scene.truth, &cloud, 0.1, 9);
    for axis in 0..3 {
        let e: Vec<f64> = clean.offsets.iter().zip(&noisy.offsets).map(|(a, b)| b[axis] - a[axis]).collect();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let std = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e.len() - 1) as f64).sqrt();
        assert!((std - 0.1).abs() < 0.005, "axis {axis}: {std}");
    }
}

#[test]
fn ablation_rows_follow_grid_and_agree_at_zero_noise() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let store = MemoryStore::from_scene(&scene);
    let truth = Arc::new(scene.truth.clone());
    let labels = scene.truth.scan_labels();
    let config = PipelineConfig {
        ablate_rho: vec![0.0, 0.1, 0.3],
        ablate_priors: vec![PriorKind::OneHot, PriorKind::Confidence],
        threads: 2,
        ..PipelineConfig::default()
    };
    let rows = pipeline::ablate(&store, &truth, &labels, &config, &map).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].report.lstq, rows[3].report.lstq);
    let table = pipeline::format_ablation_table(&rows, config.ablate_sigma);
    assert_eq!(table.lines().count(), 7);
    // frozen S_cls column for the one-hot rows, seed 0, sigma 0.2
    let golden: Vec<f64> = include_str!("fixtures/ablation_s_cls.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    let got: Vec<f64> = rows[..3].iter().map(|r| (r.report.s_cls * 1e4).round() / 1e2).collect();
    assert_eq!(got, golden);
    assert!(got.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn from_labels_matches_generator_truth() {
    let map = map();
    let scene = synth::generate(&SceneConfig::reference(&map)).unwrap();
    let pairs: Vec<_> = scene.truth.scans.iter().map(|t| (t.semantic.clone(), t.instance.clone())).collect();
    let rebuilt = synth::GroundTruth::from_labels(&scene.scans, &pairs, &map);
    for (a, b) in rebuilt.scans.iter().zip(&scene.truth.scans) {
        for (x, y) in a.center.iter().zip(&b.center) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn inspect_describes_files() {
    let map = map();
    let scene = synth::generate(&SceneConfig { n_objects: 1, points_per_scan: 5000, ..SceneConfig::reference(&map) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth::write_sequence(dir.path(), &scene, &map).unwrap();
    let layout = SequenceLayout::new(dir.path());
    let text = pipeline::inspect(&layout.scan(0), &map).unwrap();
    assert!(text.contains("5000 points"));
    let text = pipeline::inspect(&layout.label(0), &map).unwrap();
    assert!(text.contains("1 instances"));
    assert!(pipeline::inspect(&layout.poses(), &map).unwrap().contains("4 poses"));
    assert!(pipeline::inspect(&layout.calib(), &map).unwrap().contains("Tr"));
    let bad = dir.path().join("broken.bin");
    std::fs::write(&bad, [0u8; 7]).unwrap();
    assert!(pipeline::inspect(&bad, &map).is_err());
}
