//! Carries instance ids across overlapping windows.
//!
//! Each new window is matched to the previous (already relabeled) window on
//! the points both contain. Pairs are taken greedily by shared-point count;
//! unmatched instances get fresh sequence ids.

use std::collections::{BTreeMap, HashMap};

use log::warn;

use crate::geometry::Origin;
use crate::proposal::InstanceSegmentation;

/// Sequence ids are written to 16-bit label fields.
pub const MAX_GLOBAL_ID: u32 = u16::MAX as u32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrackError {
    #[error("sequence instance ids exhausted ({MAX_GLOBAL_ID} max)")]
    IdOverflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub last_window: usize,
    /// Origins of the instance's points in the last scan of that window.
    pub fingerprint: Vec<Origin>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub next_global_id: u32,
    pub active: BTreeMap<u32, TrackEntry>,
    pub windows_seen: usize,
}

impl Default for TrackState {
    fn default() -> Self {
        Self {
            next_global_id: 1,
            active: BTreeMap::new(),
            windows_seen: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StitchReport {
    pub matched: usize,
    pub fresh: usize,
    /// A previous window existed but shared no points with the new one.
    pub no_overlap: bool,
}

/// Origins present in both segmentations (both are sorted by origin).
pub fn overlap_origins(prev: &InstanceSegmentation, new: &InstanceSegmentation) -> Vec<Origin> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < prev.origins.len() && j < new.origins.len() {
        match prev.origins[i].cmp(&new.origins[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(prev.origins[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Relabels `new_window` with sequence ids, matching against `prev_window`
/// (already in sequence ids) on `overlap` points.
pub fn stitch(
    mut state: TrackState,
    prev_window: Option<&InstanceSegmentation>,
    new_window: &InstanceSegmentation,
    overlap: &[Origin],
) -> Result<(TrackState, InstanceSegmentation, StitchReport), TrackError> {
    let mut report = StitchReport::default();
    let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
    if let Some(prev) = prev_window {
        if overlap.is_empty() {
            report.no_overlap = true;
            warn!("windows share no scans; instances in the new window get fresh ids");
        }
        for o in overlap {
            let (Ok(pi), Ok(ni)) = (prev.origins.binary_search(o), new_window.origins.binary_search(o))
            else {
                continue;
            };
            let (p, n) = (prev.instance[pi], new_window.instance[ni]);
            if p != 0 && n != 0 {
                *pairs.entry((p, n)).or_default() += 1;
            }
        }
    }

    let mut edges: Vec<((u32, u32), usize)> = pairs.into_iter().collect();
    edges.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0 .0.cmp(&b.0 .0)).then(a.0 .1.cmp(&b.0 .1)));
    let mut mapping: BTreeMap<u32, u32> = BTreeMap::new();
    let mut used_prev = std::collections::HashSet::new();
    for ((p, n), _) in edges {
        if mapping.contains_key(&n) || used_prev.contains(&p) {
            continue;
        }
        mapping.insert(n, p);
        used_prev.insert(p);
        report.matched += 1;
    }

    let mut local: Vec<u32> = new_window.instance.iter().copied().filter(|&i| i != 0).collect();
    local.sort_unstable();
    local.dedup();
    for n in local {
        if mapping.contains_key(&n) {
            continue;
        }
        if state.next_global_id > MAX_GLOBAL_ID {
            return Err(TrackError::IdOverflow);
        }
        mapping.insert(n, state.next_global_id);
        state.next_global_id += 1;
        report.fresh += 1;
    }

    let mut relabeled = new_window.clone();
    for id in relabeled.instance.iter_mut().filter(|i| **i != 0) {
        *id = mapping[id];
    }

    let window_index = state.windows_seen;
    state.windows_seen += 1;
    let last_scan = relabeled.origins.last().map(|o| o.scan_index);
    for &gid in mapping.values() {
        state.active.insert(
            gid,
            TrackEntry {
                last_window: window_index,
                fingerprint: Vec::new(),
            },
        );
    }
    for (o, &gid) in relabeled.origins.iter().zip(&relabeled.instance) {
        if gid != 0 && Some(o.scan_index) == last_scan {
            if let Some(e) = state.active.get_mut(&gid) {
                e.fingerprint.push(*o);
            }
        }
    }
    Ok((state, relabeled, report))
}
