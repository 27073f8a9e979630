//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpls_core::lstq::ScanLabels;
use dpls_core::semantic::{TrainId, IGNORE};

pub type Vec3 = [f64; 3];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest point sampling recomputed from scratch at every step.
pub fn fps_exhaustive(points: &[Vec3], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut sum = [0.0; 3];
    for p in points {
        for a in 0..3 {
            sum[a] += p[a];
        }
    }
    let c = sum.map(|v| v / n as f64);
    let mut first = 0;
    for i in 1..n {
        if d2(&points[i], &c) > d2(&points[first], &c) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let m = chosen
                .iter()
                .map(|&j| d2(&points[i], &points[j]))
                .fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// DBSCAN from the definition: core points, connected components of the
/// core graph ordered by their lowest core index, borders to the first
/// component with a core neighbor.
pub fn dbscan_reference(items: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = items.len();
    let adj: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| d2(&items[i], &items[j]) <= eps * eps).collect())
        .collect();
    let core: Vec<bool> = (0..n).map(|i| adj[i].iter().filter(|x| **x).count() >= min_pts).collect();
    let mut comp = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut queue = VecDeque::from([s]);
        comp[s] = Some(next);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if core[v] && adj[u][v] && comp[v].is_none() {
                    comp[v] = Some(next);
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                (0..n).filter(|&j| core[j] && adj[i][j]).filter_map(|j| comp[j]).min()
            }
        })
        .collect()
}

/// Cluster assignment as a set of member sets, plus the noise set.
pub fn partition(labels: &[Option<usize>]) -> (BTreeSet<Vec<usize>>, Vec<usize>) {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut noise = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(c) => groups.entry(*c).or_default().push(i),
            None => noise.push(i),
        }
    }
    (groups.into_values().collect(), noise)
}

/// Association score by enumerating every (prediction, ground truth) pair in
/// exact rational arithmetic. Thing classes are given by `is_thing`.
pub fn s_assoc_rational(pred: &[ScanLabels], gt: &[ScanLabels], is_thing: impl Fn(TrainId) -> bool) -> f64 {
    let mut points: Vec<(u32, u32)> = Vec::new(); // (pred id, gt id), non-ignored points
    for (p, g) in pred.iter().zip(gt) {
        for i in 0..g.semantic.len() {
            if g.semantic[i] == IGNORE {
                continue;
            }
            let t = if g.instance[i] != 0 && is_thing(g.semantic[i]) { g.instance[i] } else { 0 };
            points.push((p.instance[i], t));
        }
    }
    let tracks: BTreeSet<u32> = points.iter().map(|x| x.1).filter(|t| *t != 0).collect();
    if tracks.is_empty() {
        return 1.0;
    }
    let preds: BTreeSet<u32> = points.iter().map(|x| x.0).filter(|s| *s != 0).collect();
    let int = |v: usize| BigRational::from_integer(BigInt::from(v));
    let mut total = BigRational::zero();
    for &t in &tracks {
        let size_t = points.iter().filter(|x| x.1 == t).count();
        let mut inner = BigRational::zero();
        for &s in &preds {
            let size_s = points.iter().filter(|x| x.0 == s).count();
            let inter = points.iter().filter(|x| x.0 == s && x.1 == t).count();
            if inter == 0 {
                continue;
            }
            let iou = int(inter) / int(size_s + size_t - inter);
            inner += int(inter) * iou;
        }
        total += inner / int(size_t);
    }
    (total / int(tracks.len())).to_f64().unwrap()
}

/// Most frequent non-ignored label by full histogram; ties to the lowest id.
pub fn majority_histogram(labels: &[TrainId]) -> Option<TrainId> {
    let mut hist: BTreeMap<TrainId, usize> = BTreeMap::new();
    for &l in labels.iter().filter(|l| **l != IGNORE) {
        *hist.entry(l).or_default() += 1;
    }
    let best = *hist.values().max()?;
    hist.into_iter().find(|(_, c)| *c == best).map(|(l, _)| l)
}

/// Index of the first maximum by linear scan.
pub fn argmax_scan(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Random points on a coarse grid so exact ties and duplicates are common.
pub fn grid_points(r: &mut ChaCha8Rng, n: usize, extent: i32, step: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| r.gen_range(-extent..=extent) as f64 * step))
        .collect()
}

/// Random labeled sequence: up to `scans` scans, `max_points` points in
/// total, up to `instances` ids in both prediction and ground truth.
pub fn random_labels(
    r: &mut ChaCha8Rng,
    scans: usize,
    max_points: usize,
    instances: u32,
    num_classes: u8,
) -> (Vec<ScanLabels>, Vec<ScanLabels>) {
    let n_scans = r.gen_range(1..=scans);
    let mut budget = r.gen_range(1..=max_points);
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for k in 0..n_scans {
        let n = if k + 1 == n_scans { budget } else { r.gen_range(0..=budget) };
        budget -= n;
        let mut p = ScanLabels { semantic: vec![], instance: vec![] };
        let mut g = ScanLabels { semantic: vec![], instance: vec![] };
        for _ in 0..n {
            g.semantic.push(if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..num_classes) });
            g.instance.push(r.gen_range(0..=instances));
            p.semantic.push(r.gen_range(0..num_classes));
            p.instance.push(r.gen_range(0..=instances));
        }
        pred.push(p);
        gt.push(g);
    }
    (pred, gt)
}

use dpls_core::pipeline::{run_sequence, MemoryStore, RunParams, RunSummary};
use dpls_core::semantic::{ClassMap, PredictionSource};
use dpls_core::synth::Scene;

/// Runs the pipeline on an in-memory scene and collects per-scan output.
pub fn segment_scene(
    scene: &Scene,
    source: &dyn PredictionSource,
    params: &RunParams,
    map: &ClassMap,
) -> (Vec<ScanLabels>, RunSummary) {
    let store = MemoryStore::from_scene(scene);
    let mut out: Vec<Option<ScanLabels>> = vec![None; scene.scans.len()];
    let summary = run_sequence(&store, source, params, map, |k, s, i| {
        assert!(out[k].is_none(), "scan {k} emitted twice");
        out[k] = Some(ScanLabels {
            semantic: s.to_vec(),
            instance: i.to_vec(),
        });
        Ok(())
    })
    .unwrap();
    (out.into_iter().map(|o| o.expect("every scan emitted")).collect(), summary)
}

/// True when semantics agree exactly and instance ids correspond one to one
/// (0 only with 0) over the whole sequence.
pub fn same_up_to_id_bijection(pred: &[ScanLabels], gt: &[ScanLabels]) -> bool {
    let mut fwd: BTreeMap<u32, u32> = BTreeMap::new();
    let mut back: BTreeMap<u32, u32> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        if p.semantic != g.semantic || p.instance.len() != g.instance.len() {
            return false;
        }
        for (&a, &b) in p.instance.iter().zip(&g.instance) {
            if (a == 0) != (b == 0) {
                return false;
            }
            if *fwd.entry(a).or_insert(b) != b || *back.entry(b).or_insert(a) != a {
                return false;
            }
        }
    }
    true
}
