//! Offset-vote instance proposals.
//!
//! Every point is shifted by its predicted offset to a center vote
//! `c_p = p + Δp`. Farthest point sampling picks seed votes among points whose
//! prior says "thing"; all points within the grouping radius of a seed join its
//! proposal, stuff points included. Proposals are summarized geometrically,
//! merged with DBSCAN on their refined centers, and resolved into one instance
//! id per point.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::geometry::{Aggregated4DCloud, Origin, Window};
use crate::semantic::{majority_label, ClassMap, TrainId, IGNORE};

pub type Vec3 = [f64; 3];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProposalError {
    #[error("{what}: {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("farthest point sampling needs at least one point and K >= 1")]
    EmptyInput,
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Predicted offsets `Δp`, aligned with an aggregated cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OffsetField {
    pub offsets: Vec<Vec3>,
}

impl OffsetField {
    pub fn zeros(n: usize) -> Self {
        Self {
            offsets: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Which coordinates non-seed points are grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSpace {
    /// Shifted center votes `c_p` (default).
    Centers,
    /// Raw aggregated positions.
    Positions,
}

/// Which points may become FPS seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedFilter {
    /// Points whose argmax prior is a thing class.
    Things,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalParams {
    /// Fixed proposal count; `None` uses `max(100, n / 500)`.
    pub k_proposals: Option<usize>,
    pub group_radius_m: f64,
    pub dbscan_eps_m: f64,
    pub dbscan_min_pts: usize,
    pub huber_delta_m: f64,
    pub group_space: GroupSpace,
    pub seed_filter: SeedFilter,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            k_proposals: None,
            group_radius_m: 0.6,
            dbscan_eps_m: 1.0,
            dbscan_min_pts: 1,
            huber_delta_m: 1.0,
            group_space: GroupSpace::Centers,
            seed_filter: SeedFilter::Things,
        }
    }
}

impl ProposalParams {
    pub fn proposal_count(&self, n_points: usize) -> usize {
        self.k_proposals.unwrap_or_else(|| (n_points / 500).max(100))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub seed_index: usize,
    /// Ascending cloud indices.
    pub member_indices: Vec<u32>,
    pub refined_center: Vec3,
    pub refined_radius: f64,
    pub bbox: Vec3,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Window(Window),
    Sequence,
}

/// Per-point semantic label and instance id (0 = no instance).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSegmentation {
    pub semantic: Vec<TrainId>,
    pub instance: Vec<u32>,
    pub origins: Vec<Origin>,
    pub scope: Scope,
    /// Points labeled with a thing class that ended up without an instance.
    pub uncovered_thing_points: usize,
}

impl InstanceSegmentation {
    pub fn len(&self) -> usize {
        self.instance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance.is_empty()
    }

    pub fn num_instances(&self) -> u32 {
        self.instance.iter().copied().max().unwrap_or(0)
    }
}

/// `c_p[i] = positions[i] + offsets[i]`.
pub fn shift_to_centers(
    cloud: &Aggregated4DCloud,
    field: &OffsetField,
) -> Result<Vec<Vec3>, ProposalError> {
    if field.len() != cloud.len() {
        return Err(ProposalError::LengthMismatch {
            what: "offset field",
            found: field.len(),
            expected: cloud.len(),
        });
    }
    Ok(cloud
        .positions
        .iter()
        .zip(&field.offsets)
        .map(|(p, d)| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
        .collect())
}

/// Greedy max-min subset selection.
///
/// The first pick is the point farthest from the centroid; each later pick
/// maximizes the distance to the already chosen set. Ties go to the lowest
/// index. Returns `min(k, n)` indices in selection order.
pub fn farthest_point_sample(points: &[Vec3], k: usize) -> Result<Vec<usize>, ProposalError> {
    if points.is_empty() || k == 0 {
        return Err(ProposalError::EmptyInput);
    }
    let n = points.len();
    let sum = points
        .iter()
        .fold([0.0; 3], |acc, p| [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]);
    let centroid = sum.map(|v| v / n as f64);
    let mut current = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &centroid);
        if d > best {
            best = d;
            current = i;
        }
    }

    let take = k.min(n);
    let mut selected = Vec::with_capacity(take);
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    loop {
        selected.push(current);
        chosen[current] = true;
        if selected.len() == take {
            break;
        }
        let c = points[current];
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = dist2(p, &c);
            let m = &mut min_d[i];
            if d < *m {
                *m = d;
            }
            if *m > best {
                best = *m;
                next = i;
            }
        }
        current = next;
    }
    Ok(selected)
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Vec3, size: f64) -> Cell {
    (
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    )
}

/// For each seed center, the ascending indices of all points within `r` (inclusive).
pub fn radius_group(seed_centers: &[Vec3], points: &[Vec3], r: f64) -> Vec<Vec<u32>> {
    assert!(r > 0.0, "grouping radius must be positive");
    let r2 = r * r;
    if seed_centers.is_empty() {
        return Vec::new();
    }
    // Hash grid with cell edge slightly above r: every neighbor lies in the 27 surrounding cells.
    let size = r * (1.0 + 1e-6);
    let mut grid: HashMap<Cell, Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell_of(p, size)).or_default().push(i as u32);
    }
    seed_centers
        .iter()
        .map(|s| {
            let (cx, cy, cz) = cell_of(s, size);
            let mut members = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            members.extend(
                                bucket
                                    .iter()
                                    .copied()
                                    .filter(|&i| dist2(&points[i as usize], s) <= r2),
                            );
                        }
                    }
                }
            }
            members.sort_unstable();
            members
        })
        .collect()
}

/// Geometric summary of a proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub center: Vec3,
    pub radius: f64,
    pub bbox: Vec3,
    pub embedding: Vec<f64>,
}

/// Center = mean vote, radius = farthest member position from that center,
/// bbox = axis-aligned extents of member positions, embedding = center.
pub fn refine_proposal(positions: &[Vec3], centers: &[Vec3], members: &[u32]) -> Refinement {
    assert!(!members.is_empty(), "proposal without members");
    let n = members.len() as f64;
    let mut sum = [0.0; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &m in members {
        let c = centers[m as usize];
        let p = positions[m as usize];
        for a in 0..3 {
            sum[a] += c[a];
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [sum[0] / n, sum[1] / n, sum[2] / n];
    let radius = members
        .iter()
        .map(|&m| dist2(&positions[m as usize], &center))
        .fold(0.0f64, f64::max)
        .sqrt();
    Refinement {
        center,
        radius,
        bbox: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        embedding: center.to_vec(),
    }
}

/// Density-based clustering. Returns a cluster id per item or `None` for noise.
///
/// An item is core when at least `min_pts` items (itself included) lie within
/// `eps`. Clusters are numbered in discovery order under ascending item
/// iteration; a border item reachable from several clusters joins the first.
pub fn dbscan<E: AsRef<[f64]>>(embeddings: &[E], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    assert!(eps > 0.0 && min_pts >= 1);
    let n = embeddings.len();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        let a = embeddings[i].as_ref();
        (0..n)
            .filter(|&j| {
                let b = embeddings[j].as_ref();
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() <= eps2
            })
            .collect()
    };

    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unvisited,
        Noise,
        Cluster(usize),
    }
    let mut state = vec![State::Unvisited; n];
    let mut next_cluster = 0;
    for i in 0..n {
        if state[i] != State::Unvisited {
            continue;
        }
        let seeds = neighbors(i);
        if seeds.len() < min_pts {
            state[i] = State::Noise;
            continue;
        }
        let c = next_cluster;
        next_cluster += 1;
        state[i] = State::Cluster(c);
        let mut queue: std::collections::VecDeque<usize> = seeds.into();
        while let Some(q) = queue.pop_front() {
            match state[q] {
                State::Noise => state[q] = State::Cluster(c),
                State::Unvisited => {
                    state[q] = State::Cluster(c);
                    let nq = neighbors(q);
                    if nq.len() >= min_pts {
                        queue.extend(nq);
                    }
                }
                State::Cluster(_) => {}
            }
        }
    }
    state
        .into_iter()
        .map(|s| match s {
            State::Cluster(c) => Some(c),
            _ => None,
        })
        .collect()
}

/// Unions clustered proposals into instances and resolves each point to one id.
///
/// Points claimed by several instances go to the instance whose mean vote is
/// nearest their own vote (ties: lower id). Each instance takes the majority
/// of its members' prior labels; instances whose majority is a stuff class are
/// dissolved back to id 0. Surviving ids are contiguous from 1.
pub fn merge_and_assign(
    cloud: &Aggregated4DCloud,
    centers: &[Vec3],
    proposals: &[Proposal],
    cluster_ids: &[Option<usize>],
    point_labels: &[TrainId],
    class_map: &ClassMap,
) -> InstanceSegmentation {
    let n = cloud.len();
    debug_assert_eq!(centers.len(), n);
    debug_assert_eq!(point_labels.len(), n);
    debug_assert_eq!(proposals.len(), cluster_ids.len());

    // Group proposals; noise proposals stay singletons. Ids follow first appearance.
    #[derive(Hash, PartialEq, Eq)]
    enum Key {
        Cluster(usize),
        Single(usize),
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<Key, usize> = HashMap::new();
    for (p, cid) in cluster_ids.iter().enumerate() {
        let key = match cid {
            Some(c) => Key::Cluster(*c),
            None => Key::Single(p),
        };
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(p);
    }

    // Union memberships and mean votes per candidate instance.
    let mut seen = vec![u32::MAX; n];
    let mut owner = vec![u32::MAX; n];
    let mut owner_d2 = vec![f64::INFINITY; n];
    for (g, props) in groups.iter().enumerate() {
        let mut members: Vec<u32> = Vec::new();
        for &p in props {
            for &m in &proposals[p].member_indices {
                if seen[m as usize] != g as u32 {
                    seen[m as usize] = g as u32;
                    members.push(m);
                }
            }
        }
        if members.is_empty() {
            continue;
        }
        let inv = 1.0 / members.len() as f64;
        let center = members.iter().fold([0.0; 3], |acc, &m| {
            let c = centers[m as usize];
            [acc[0] + c[0] * inv, acc[1] + c[1] * inv, acc[2] + c[2] * inv]
        });
        for &m in &members {
            let d = dist2(&centers[m as usize], &center);
            if d < owner_d2[m as usize] {
                owner_d2[m as usize] = d;
                owner[m as usize] = g as u32;
            }
        }
    }

    let mut by_group: Vec<Vec<u32>> = vec![Vec::new(); groups.len()];
    for (i, &g) in owner.iter().enumerate() {
        if g != u32::MAX {
            by_group[g as usize].push(i as u32);
        }
    }

    let mut semantic = point_labels.to_vec();
    let mut instance = vec![0u32; n];
    let mut next_id = 1u32;
    for members in by_group.iter().filter(|m| !m.is_empty()) {
        let label = match majority_label(members.iter().map(|&m| point_labels[m as usize])) {
            Ok(l) if class_map.is_thing(l) => l,
            _ => continue,
        };
        for &m in members {
            semantic[m as usize] = label;
            instance[m as usize] = next_id;
        }
        next_id += 1;
    }

    let uncovered_thing_points = semantic
        .iter()
        .zip(&instance)
        .filter(|(s, i)| **i == 0 && **s != IGNORE && class_map.is_thing(**s))
        .count();

    InstanceSegmentation {
        semantic,
        instance,
        origins: cloud.origin.clone(),
        scope: Scope::Window(cloud.window),
        uncovered_thing_points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberLoss {
    pub value: f64,
    pub thing_points: usize,
    /// No thing point was present; `value` is 0 by convention.
    pub no_thing_points: bool,
}

/// Mean Huber penalty of `‖c_p − c_gt‖` over thing points only.
pub fn huber_center_loss(
    predicted: &[Vec3],
    ground_truth: &[Vec3],
    thing_mask: &[bool],
    delta: f64,
) -> Result<HuberLoss, ProposalError> {
    for (what, len) in [("ground-truth centers", ground_truth.len()), ("thing mask", thing_mask.len())] {
        if len != predicted.len() {
            return Err(ProposalError::LengthMismatch {
                what,
                found: len,
                expected: predicted.len(),
            });
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((c, g), _) in predicted
        .iter()
        .zip(ground_truth)
        .zip(thing_mask)
        .filter(|(_, m)| **m)
    {
        let a = dist2(c, g).sqrt();
        sum += if a <= delta {
            0.5 * a * a
        } else {
            delta * (a - 0.5 * delta)
        };
        count += 1;
    }
    Ok(HuberLoss {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        thing_points: count,
        no_thing_points: count == 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalDiagnostic {
    pub proposal: usize,
    pub gt_instance: u32,
    pub center_error: f64,
    pub radius_error: f64,
    pub bbox_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregationDiagnostics {
    pub matched: Vec<ProposalDiagnostic>,
    pub unmatched: Vec<usize>,
}

/// Compares each proposal's refinement against the ground-truth instance that
/// owns the plurality of its members (ties: lower id).
pub fn aggregation_diagnostics(
    proposals: &[Proposal],
    positions: &[Vec3],
    gt_instances: &[u32],
) -> AggregationDiagnostics {
    struct Acc {
        sum: Vec3,
        lo: Vec3,
        hi: Vec3,
        n: usize,
    }
    let mut gt: HashMap<u32, Acc> = HashMap::new();
    for (p, &id) in positions.iter().zip(gt_instances) {
        if id == 0 {
            continue;
        }
        let a = gt.entry(id).or_insert(Acc {
            sum: [0.0; 3],
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
            n: 0,
        });
        for k in 0..3 {
            a.sum[k] += p[k];
            a.lo[k] = a.lo[k].min(p[k]);
            a.hi[k] = a.hi[k].max(p[k]);
        }
        a.n += 1;
    }
    let centroid = |a: &Acc| [a.sum[0] / a.n as f64, a.sum[1] / a.n as f64, a.sum[2] / a.n as f64];
    let mut gt_radius: HashMap<u32, f64> = HashMap::new();
    for (p, &id) in positions.iter().zip(gt_instances) {
        if let Some(a) = gt.get(&id) {
            let r = gt_radius.entry(id).or_insert(0.0);
            *r = r.max(dist2(p, &centroid(a)));
        }
    }

    let mut out = AggregationDiagnostics::default();
    for (pi, prop) in proposals.iter().enumerate() {
        let mut votes: HashMap<u32, usize> = HashMap::new();
        for &m in &prop.member_indices {
            let id = gt_instances[m as usize];
            if id != 0 {
                *votes.entry(id).or_default() += 1;
            }
        }
        let Some((&id, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            out.unmatched.push(pi);
            continue;
        };
        let a = &gt[&id];
        let c = centroid(a);
        let extents = [a.hi[0] - a.lo[0], a.hi[1] - a.lo[1], a.hi[2] - a.lo[2]];
        out.matched.push(ProposalDiagnostic {
            proposal: pi,
            gt_instance: id,
            center_error: dist2(&prop.refined_center, &c).sqrt(),
            radius_error: (prop.refined_radius - gt_radius[&id].sqrt()).abs(),
            bbox_error: (0..3).map(|k| (prop.bbox[k] - extents[k]).abs()).sum(),
        });
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowStats {
    pub n_points: usize,
    pub n_seed_candidates: usize,
    pub k: usize,
    pub n_proposals: usize,
    pub n_clusters: usize,
    pub n_instances: u32,
    pub shift_fps_group: Duration,
    pub refine_merge: Duration,
}

#[derive(Debug, Clone)]
pub struct WindowOutput {
    pub segmentation: InstanceSegmentation,
    pub proposals: Vec<Proposal>,
    pub stats: WindowStats,
}

/// Runs shift, FPS, grouping, refinement, DBSCAN and merging on one window.
pub fn segment_window(
    cloud: &Aggregated4DCloud,
    field: &OffsetField,
    params: &ProposalParams,
    class_map: &ClassMap,
) -> Result<WindowOutput, ProposalError> {
    let t0 = Instant::now();
    let centers = shift_to_centers(cloud, field)?;
    let labels = cloud.prior.argmax_labels();

    let candidates: Vec<usize> = match params.seed_filter {
        SeedFilter::Things => (0..cloud.len())
            .filter(|&i| class_map.is_thing(labels[i]))
            .collect(),
        SeedFilter::All => (0..cloud.len()).collect(),
    };
    let k = params.proposal_count(cloud.len());
    let seeds: Vec<usize> = if candidates.is_empty() {
        Vec::new()
    } else {
        let votes: Vec<Vec3> = candidates.iter().map(|&i| centers[i]).collect();
        farthest_point_sample(&votes, k)?
            .into_iter()
            .map(|j| candidates[j])
            .collect()
    };
    let seed_centers: Vec<Vec3> = seeds.iter().map(|&s| centers[s]).collect();
    let member_space = match params.group_space {
        GroupSpace::Centers => &centers,
        GroupSpace::Positions => &cloud.positions,
    };
    let groups = radius_group(&seed_centers, member_space, params.group_radius_m);
    let shift_fps_group = t0.elapsed();

    let t1 = Instant::now();
    let proposals: Vec<Proposal> = seeds
        .iter()
        .zip(groups)
        .map(|(&seed, mut members)| {
            if members.binary_search(&(seed as u32)).is_err() {
                // only reachable when members are grouped by raw position
                let at = members.partition_point(|&m| m < seed as u32);
                members.insert(at, seed as u32);
            }
            let r = refine_proposal(&cloud.positions, &centers, &members);
            Proposal {
                seed_index: seed,
                member_indices: members,
                refined_center: r.center,
                refined_radius: r.radius,
                bbox: r.bbox,
                embedding: r.embedding,
            }
        })
        .collect();
    let embeddings: Vec<&[f64]> = proposals.iter().map(|p| p.embedding.as_slice()).collect();
    let cluster_ids = dbscan(&embeddings, params.dbscan_eps_m, params.dbscan_min_pts);
    let n_clusters = cluster_ids.iter().flatten().max().map_or(0, |m| m + 1)
        + cluster_ids.iter().filter(|c| c.is_none()).count();
    let segmentation = merge_and_assign(cloud, &centers, &proposals, &cluster_ids, &labels, class_map);
    let refine_merge = t1.elapsed();

    let stats = WindowStats {
        n_points: cloud.len(),
        n_seed_candidates: candidates.len(),
        k,
        n_proposals: proposals.len(),
        n_clusters,
        n_instances: segmentation.num_instances(),
        shift_fps_group,
        refine_merge,
    };
    Ok(WindowOutput {
        segmentation,
        proposals,
        stats,
    })
}
