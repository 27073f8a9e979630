//! LiDAR Segmentation and Tracking Quality.
//!
//! `LSTQ = sqrt(S_cls * S_assoc)`. `S_cls` is the mean IoU over classes seen in
//! prediction or ground truth. `S_assoc` is class-agnostic and sequence-level:
//!
//! ```text
//! S_assoc = 1/|T| Σ_t 1/|t| Σ_{s : |s∩t| > 0} |s∩t| · IoU(s, t)
//! ```
//!
//! over ground-truth thing instances `t` and predicted instances `s`. Counts
//! are accumulated per scan in 64-bit integers and only divided at report time.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::semantic::{ClassMap, TrainId, IGNORE};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("scan {scan}: {what} has {found} points, ground truth has {expected}")]
    LengthMismatch {
        scan: usize,
        what: &'static str,
        found: usize,
        expected: usize,
    },
}

/// Labels of one scan in train-id space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanLabels {
    pub semantic: Vec<TrainId>,
    pub instance: Vec<u32>,
}

impl ScanLabels {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

/// A full sequence of per-scan labels.
pub type SequenceLabels = Vec<ScanLabels>;

/// Geometric mean of the two scores.
pub fn lstq(s_cls: f64, s_assoc: f64) -> f64 {
    (s_cls * s_assoc).sqrt()
}

/// Instances from different sequences never share an id.
type InstanceKey = (u32, u32);

/// Streaming count accumulator. Per-scan additions commute; accumulators over
/// disjoint scan sets may be merged.
#[derive(Debug, Clone)]
pub struct LstqAccumulator {
    thing_mask: Vec<bool>,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    gt_size: HashMap<InstanceKey, u64>,
    pred_size: HashMap<InstanceKey, u64>,
    intersection: HashMap<(InstanceKey, InstanceKey), u64>,
    sequence: u32,
    scans: usize,
    points: u64,
}

impl LstqAccumulator {
    pub fn new(class_map: &ClassMap) -> Self {
        Self::with_thing_mask(class_map.thing_mask().to_vec())
    }

    pub fn with_thing_mask(thing_mask: Vec<bool>) -> Self {
        let c = thing_mask.len();
        Self {
            thing_mask,
            tp: vec![0; c],
            fp: vec![0; c],
            fn_: vec![0; c],
            gt_size: HashMap::new(),
            pred_size: HashMap::new(),
            intersection: HashMap::new(),
            sequence: 0,
            scans: 0,
            points: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.thing_mask.len()
    }

    /// Subsequent scans belong to a new sequence; instance ids restart.
    pub fn next_sequence(&mut self) {
        self.sequence += 1;
    }

    fn is_thing(&self, id: TrainId) -> bool {
        self.thing_mask.get(id as usize).copied().unwrap_or(false)
    }

    pub fn add_scan(&mut self, pred: &ScanLabels, gt: &ScanLabels) -> Result<(), EvalError> {
        let n = gt.len();
        for (what, len) in [
            ("ground-truth instances", gt.instance.len()),
            ("predicted semantics", pred.semantic.len()),
            ("predicted instances", pred.instance.len()),
        ] {
            if len != n {
                return Err(EvalError::LengthMismatch {
                    scan: self.scans,
                    what,
                    found: len,
                    expected: n,
                });
            }
        }
        let c = self.num_classes();
        let seq = self.sequence;
        for i in 0..n {
            let g = gt.semantic[i];
            if g == IGNORE || g as usize >= c {
                continue;
            }
            self.points += 1;
            let p = pred.semantic[i];
            if p == g {
                self.tp[g as usize] += 1;
            } else {
                self.fn_[g as usize] += 1;
                if (p as usize) < c {
                    self.fp[p as usize] += 1;
                }
            }

            let s = pred.instance[i];
            if s != 0 {
                *self.pred_size.entry((seq, s)).or_default() += 1;
            }
            let t = gt.instance[i];
            if t != 0 && self.is_thing(g) {
                *self.gt_size.entry((seq, t)).or_default() += 1;
                if s != 0 {
                    *self.intersection.entry(((seq, s), (seq, t))).or_default() += 1;
                }
            }
        }
        self.scans += 1;
        Ok(())
    }

    /// Adds counts from an accumulator that covered other scans of the same sequences.
    pub fn merge(&mut self, other: &LstqAccumulator) {
        for (a, b) in [(&mut self.tp, &other.tp), (&mut self.fp, &other.fp), (&mut self.fn_, &other.fn_)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (k, v) in &other.gt_size {
            *self.gt_size.entry(*k).or_default() += v;
        }
        for (k, v) in &other.pred_size {
            *self.pred_size.entry(*k).or_default() += v;
        }
        for (k, v) in &other.intersection {
            *self.intersection.entry(*k).or_default() += v;
        }
        self.scans += other.scans;
        self.points += other.points;
    }

    pub fn class_score(&self) -> ClassScore {
        class_score_from_counts(&self.tp, &self.fp, &self.fn_, &self.thing_mask)
    }

    /// `(S_assoc, no_gt_instances)`; with no ground-truth instances the score is 1.
    pub fn association_score(&self) -> (f64, bool) {
        if self.gt_size.is_empty() {
            return (1.0, true);
        }
        let mut pairs: Vec<_> = self.intersection.iter().collect();
        pairs.sort_unstable_by_key(|(k, _)| **k);
        let mut per_track: HashMap<InstanceKey, f64> = HashMap::new();
        for (&(s, t), &inter) in pairs {
            let (ss, ts) = (self.pred_size[&s], self.gt_size[&t]);
            let inter = inter as f64;
            let iou = inter / (ss as f64 + ts as f64 - inter);
            *per_track.entry(t).or_default() += inter * iou;
        }
        let mut keys: Vec<&InstanceKey> = self.gt_size.keys().collect();
        keys.sort_unstable();
        let total: f64 = keys
            .iter()
            .map(|t| per_track.get(t).copied().unwrap_or(0.0) / self.gt_size[t] as f64)
            .sum();
        (total / keys.len() as f64, false)
    }

    pub fn report(&self) -> LstqReport {
        let cls = self.class_score();
        let (s_assoc, no_gt_instances) = self.association_score();
        LstqReport {
            lstq: lstq(cls.s_cls, s_assoc),
            s_cls: cls.s_cls,
            s_assoc,
            per_class_iou: cls.per_class_iou,
            iou_th: cls.iou_th,
            iou_st: cls.iou_st,
            no_gt_instances,
            counts: ConfusionCounts {
                tp: self.tp.clone(),
                fp: self.fp.clone(),
                fn_: self.fn_.clone(),
                points: self.points,
                scans: self.scans,
                gt_instances: self.gt_size.len(),
                pred_instances: self.pred_size.len(),
            },
        }
    }
}

/// Per-class IoU and its means. Classes with an empty union are left out of
/// every mean; an empty mean is 1.
pub fn class_score_from_counts(tp: &[u64], fp: &[u64], fn_: &[u64], thing_mask: &[bool]) -> ClassScore {
    let per_class_iou: Vec<Option<f64>> = (0..thing_mask.len())
        .map(|k| {
            let union = tp[k] + fp[k] + fn_[k];
            (union > 0).then(|| tp[k] as f64 / union as f64)
        })
        .collect();
    let mean = |filter: &dyn Fn(usize) -> bool| -> f64 {
        let vals: Vec<f64> = per_class_iou
            .iter()
            .enumerate()
            .filter(|(k, _)| filter(*k))
            .filter_map(|(_, v)| *v)
            .collect();
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    ClassScore {
        s_cls: mean(&|_| true),
        iou_th: mean(&|k| thing_mask[k]),
        iou_st: mean(&|k| !thing_mask[k]),
        per_class_iou,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub s_cls: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub iou_th: f64,
    pub iou_st: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub points: u64,
    pub scans: usize,
    pub gt_instances: usize,
    pub pred_instances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstqReport {
    pub lstq: f64,
    pub s_assoc: f64,
    pub s_cls: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub iou_th: f64,
    pub iou_st: f64,
    pub no_gt_instances: bool,
    pub counts: ConfusionCounts,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl LstqReport {
    /// `key = value` lines, percentages with two decimals.
    pub fn to_key_values(&self, class_map: &ClassMap) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("lstq", self.lstq),
            ("s_assoc", self.s_assoc),
            ("s_cls", self.s_cls),
            ("iou_th", self.iou_th),
            ("iou_st", self.iou_st),
        ] {
            let _ = writeln!(out, "{k} = {}", pct(v));
        }
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let value = iou.map_or_else(|| "nan".to_string(), pct);
            let _ = writeln!(out, "iou.{} = {value}", class_map.name(k as TrainId));
        }
        out
    }

    pub fn to_table(&self, class_map: &ClassMap) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8} {:>9} {:>8} {:>8} {:>8}",
            "LSTQ%", "S_assoc%", "S_cls%", "IoU_Th%", "IoU_St%"
        );
        let _ = writeln!(
            out,
            "{:>8} {:>9} {:>8} {:>8} {:>8}",
            pct(self.lstq),
            pct(self.s_assoc),
            pct(self.s_cls),
            pct(self.iou_th),
            pct(self.iou_st)
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<16} {:>8} {:>10} {:>10} {:>10}", "class", "IoU%", "TP", "FP", "FN");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>10} {:>10} {:>10}",
                class_map.name(k as TrainId),
                iou.map_or_else(|| "-".to_string(), pct),
                self.counts.tp[k],
                self.counts.fp[k],
                self.counts.fn_[k]
            );
        }
        let _ = writeln!(
            out,
            "\nscans {}  points {}  gt instances {}  predicted instances {}",
            self.counts.scans, self.counts.points, self.counts.gt_instances, self.counts.pred_instances
        );
        out
    }
}

/// Classification part of the metric over whole sequences.
pub fn s_cls(pred: &[ScanLabels], gt: &[ScanLabels], class_map: &ClassMap) -> Result<ClassScore, EvalError> {
    Ok(accumulate(pred, gt, class_map)?.class_score())
}

/// Association part of the metric over one sequence.
pub fn s_assoc(pred: &[ScanLabels], gt: &[ScanLabels], class_map: &ClassMap) -> Result<f64, EvalError> {
    Ok(accumulate(pred, gt, class_map)?.association_score().0)
}

pub fn evaluate_sequence(
    pred: &[ScanLabels],
    gt: &[ScanLabels],
    class_map: &ClassMap,
) -> Result<LstqReport, EvalError> {
    Ok(accumulate(pred, gt, class_map)?.report())
}

fn accumulate(pred: &[ScanLabels], gt: &[ScanLabels], class_map: &ClassMap) -> Result<LstqAccumulator, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            scan: pred.len().min(gt.len()),
            what: "prediction sequence (scans)",
            found: pred.len(),
            expected: gt.len(),
        });
    }
    let mut acc = LstqAccumulator::new(class_map);
    for (p, g) in pred.iter().zip(gt) {
        acc.add_scan(p, g)?;
    }
    Ok(acc)
}
