//! C ABI over `dpls-core`.
//!
//! Every fallible call returns a [`DplsStatus`]. On failure the message is kept
//! per thread and can be fetched with [`dpls_last_error_message`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dpls_core::formats::{self, LabelRecord, PointCloudScan};
use dpls_core::geometry::{aggregate, RigidTransform, Window};
use dpls_core::lstq::{self, LstqAccumulator, ScanLabels};
use dpls_core::proposal::{farthest_point_sample, segment_window, OffsetField, ProposalParams};
use dpls_core::semantic::{encode_one_hot, ClassMap};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DplsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Eval = 5,
    Proposal = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Headline scores of an evaluator, all in `[0, 1]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DplsScores {
    pub lstq: f64,
    pub s_assoc: f64,
    pub s_cls: f64,
    pub iou_th: f64,
    pub iou_st: f64,
}

/// Class table (raw ids, train ids, thing flags).
pub struct DplsClassMap(ClassMap);

/// One decoded `.bin` scan.
pub struct DplsScan(PointCloudScan);

/// Streaming LSTQ accumulator.
pub struct DplsEvaluator(LstqAccumulator);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

struct Fail(DplsStatus, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(DplsStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Fail(DplsStatus::InvalidArgument, msg.into())
    }
}

impl From<formats::FormatError> for Fail {
    fn from(e: formats::FormatError) -> Self {
        let code = match e {
            formats::FormatError::Io { .. } => DplsStatus::Io,
            _ => DplsStatus::Format,
        };
        Fail(code, e.to_string())
    }
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DplsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DplsStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DplsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail::arg("path is not valid UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn triples(n: usize) -> Result<usize, Fail> {
    n.checked_mul(3).ok_or_else(|| Fail::arg(format!("{n} points overflow the address space")))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::null(what))
}

unsafe fn store_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread. Valid until the next call
/// on the same thread; empty if nothing has failed yet.
#[no_mangle]
pub extern "C" fn dpls_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// `sqrt(s_cls * s_assoc)`.
#[no_mangle]
pub extern "C" fn dpls_lstq(s_cls: f64, s_assoc: f64) -> f64 {
    lstq::lstq(s_cls, s_assoc)
}

/// Built-in SemanticKITTI table. Never fails.
#[no_mangle]
pub extern "C" fn dpls_class_map_semantic_kitti() -> *mut DplsClassMap {
    Box::into_raw(Box::new(DplsClassMap(ClassMap::semantic_kitti())))
}

/// Loads a class-map file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dpls_class_map_load(path: *const c_char, out: *mut *mut DplsClassMap) -> DplsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let map = ClassMap::load(&path).map_err(|e| Fail(DplsStatus::Format, e.to_string()))?;
        store_handle(out, DplsClassMap(map))
    })
}

/// Number of train classes, or 0 for a null handle.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpls_class_map_num_classes(map: *const DplsClassMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.num_classes())
}

/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpls_class_map_is_thing(map: *const DplsClassMap, train_id: u8) -> bool {
    map.as_ref().is_some_and(|m| m.0.is_thing(train_id))
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpls_class_map_free(map: *mut DplsClassMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Reads a `.bin` scan.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dpls_scan_read(path: *const c_char, out: *mut *mut DplsScan) -> DplsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let scan = formats::read_scan(&path, 0)?;
        store_handle(out, DplsScan(scan))
    })
}

/// Point count, or 0 for a null handle.
///
/// # Safety
/// `scan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpls_scan_len(scan: *const DplsScan) -> usize {
    scan.as_ref().map_or(0, |s| s.0.len())
}

/// Copies `x y z remission` rows into `out`, which holds `capacity` floats.
///
/// # Safety
/// `scan` must be a live handle and `out` must hold `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn dpls_scan_copy_points(scan: *const DplsScan, out: *mut f32, capacity: usize) -> DplsStatus {
    guard(|| {
        let scan = &ref_arg(scan, "scan")?.0;
        let need = scan.len() * 4;
        if capacity < need {
            return Err(Fail(DplsStatus::BufferTooSmall, format!("need {need} floats, got {capacity}")));
        }
        let out = slice_mut_arg(out, need, "out")?;
        for ((row, p), f) in out.chunks_exact_mut(4).zip(&scan.points).zip(&scan.feature) {
            row.copy_from_slice(&[p[0], p[1], p[2], *f]);
        }
        Ok(())
    })
}

/// # Safety
/// `scan` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpls_scan_free(scan: *mut DplsScan) {
    if !scan.is_null() {
        drop(Box::from_raw(scan));
    }
}

/// Reads a `.label` file into raw semantic and instance ids.
///
/// `count` receives the number of records. Pass null buffers to query the
/// count only.
///
/// # Safety
/// `semantic` and `instance` must be null or hold `capacity` values each.
#[no_mangle]
pub unsafe extern "C" fn dpls_labels_read(
    path: *const c_char,
    semantic: *mut u16,
    instance: *mut u16,
    capacity: usize,
    count: *mut usize,
) -> DplsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let labels = formats::read_labels_any(&path)?;
        if count.is_null() {
            return Err(Fail::null("count"));
        }
        *count = labels.len();
        if semantic.is_null() && instance.is_null() {
            return Ok(());
        }
        if capacity < labels.len() {
            return Err(Fail(
                DplsStatus::BufferTooSmall,
                format!("need {} records, got {capacity}", labels.len()),
            ));
        }
        let sem = slice_mut_arg(semantic, labels.len(), "semantic")?;
        let inst = slice_mut_arg(instance, labels.len(), "instance")?;
        for ((l, s), i) in labels.iter().zip(sem).zip(inst) {
            *s = l.semantic_raw;
            *i = l.instance_id;
        }
        Ok(())
    })
}

/// Writes `n` packed label words.
///
/// # Safety
/// `semantic` and `instance` must hold `n` values each.
#[no_mangle]
pub unsafe extern "C" fn dpls_labels_write(
    path: *const c_char,
    semantic: *const u16,
    instance: *const u16,
    n: usize,
) -> DplsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let sem = slice_arg(semantic, n, "semantic")?;
        let inst = slice_arg(instance, n, "instance")?;
        let records: Vec<LabelRecord> = sem.iter().zip(inst).map(|(&s, &i)| LabelRecord::new(s, i)).collect();
        formats::write_labels(&path, &records)?;
        Ok(())
    })
}

/// New evaluator over the classes of `map`. Returns null for a null map.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpls_evaluator_new(map: *const DplsClassMap) -> *mut DplsEvaluator {
    match map.as_ref() {
        Some(m) => Box::into_raw(Box::new(DplsEvaluator(LstqAccumulator::new(&m.0)))),
        None => ptr::null_mut(),
    }
}

/// Adds one scan of `n` points. Labels are train ids; 255 is ignore.
///
/// # Safety
/// All four arrays must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn dpls_evaluator_add_scan(
    evaluator: *mut DplsEvaluator,
    pred_semantic: *const u8,
    pred_instance: *const u32,
    gt_semantic: *const u8,
    gt_instance: *const u32,
    n: usize,
) -> DplsStatus {
    guard(|| {
        let ev = &mut evaluator.as_mut().ok_or_else(|| Fail::null("evaluator"))?.0;
        let pred = ScanLabels {
            semantic: slice_arg(pred_semantic, n, "pred_semantic")?.to_vec(),
            instance: slice_arg(pred_instance, n, "pred_instance")?.to_vec(),
        };
        let gt = ScanLabels {
            semantic: slice_arg(gt_semantic, n, "gt_semantic")?.to_vec(),
            instance: slice_arg(gt_instance, n, "gt_instance")?.to_vec(),
        };
        ev.add_scan(&pred, &gt).map_err(|e| Fail(DplsStatus::Eval, e.to_string()))
    })
}

/// Later scans belong to a new sequence, so instance ids restart.
///
/// # Safety
/// `evaluator` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpls_evaluator_next_sequence(evaluator: *mut DplsEvaluator) -> DplsStatus {
    guard(|| {
        evaluator.as_mut().ok_or_else(|| Fail::null("evaluator"))?.0.next_sequence();
        Ok(())
    })
}

/// # Safety
/// `evaluator` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dpls_evaluator_scores(evaluator: *const DplsEvaluator, out: *mut DplsScores) -> DplsStatus {
    guard(|| {
        let r = ref_arg(evaluator, "evaluator")?.0.report();
        let out = out.as_mut().ok_or_else(|| Fail::null("out"))?;
        *out = DplsScores {
            lstq: r.lstq,
            s_assoc: r.s_assoc,
            s_cls: r.s_cls,
            iou_th: r.iou_th,
            iou_st: r.iou_st,
        };
        Ok(())
    })
}

/// # Safety
/// `evaluator` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpls_evaluator_free(evaluator: *mut DplsEvaluator) {
    if !evaluator.is_null() {
        drop(Box::from_raw(evaluator));
    }
}

/// Farthest point sampling over `n` xyz triples. Writes `min(k, n)` indices.
///
/// # Safety
/// `points` must hold `3 * n` values and `out` `k` values.
#[no_mangle]
pub unsafe extern "C" fn dpls_fps(
    points: *const f64,
    n: usize,
    k: usize,
    out: *mut usize,
    out_count: *mut usize,
) -> DplsStatus {
    guard(|| {
        let flat = slice_arg(points, triples(n)?, "points")?;
        let pts: Vec<[f64; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let picked = farthest_point_sample(&pts, k).map_err(|e| Fail(DplsStatus::Proposal, e.to_string()))?;
        slice_mut_arg(out, picked.len(), "out")?.copy_from_slice(&picked);
        *out_count.as_mut().ok_or_else(|| Fail::null("out_count"))? = picked.len();
        Ok(())
    })
}

/// Segments a single scan with default proposal parameters.
///
/// `xyz` holds `3 * n` sensor-frame coordinates, `semantic` the predicted
/// train id per point, and `offsets` the predicted `3 * n` center offsets.
/// Outputs are per-point train ids and instance ids (0 = none).
///
/// # Safety
/// Inputs and outputs must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn dpls_segment_scan(
    map: *const DplsClassMap,
    xyz: *const f32,
    semantic: *const u8,
    offsets: *const f64,
    n: usize,
    out_semantic: *mut u8,
    out_instance: *mut u32,
) -> DplsStatus {
    guard(|| {
        let map = &ref_arg(map, "map")?.0;
        let xyz = slice_arg(xyz, triples(n)?, "xyz")?;
        let semantic = slice_arg(semantic, n, "semantic")?;
        let offsets = slice_arg(offsets, triples(n)?, "offsets")?;
        let scan = PointCloudScan {
            points: xyz.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            feature: vec![0.0; n],
            scan_index: 0,
        };
        let prior = encode_one_hot(semantic, map.num_classes()).map_err(|e| Fail::arg(e.to_string()))?;
        let cloud = aggregate(&[scan], &[RigidTransform::identity()], &[prior], Window::new(0, 1))
            .map_err(|e| Fail::arg(e.to_string()))?;
        let field = OffsetField {
            offsets: offsets.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        };
        let seg = segment_window(&cloud, &field, &ProposalParams::default(), map)
            .map_err(|e| Fail(DplsStatus::Proposal, e.to_string()))?
            .segmentation;
        slice_mut_arg(out_semantic, n, "out_semantic")?.copy_from_slice(&seg.semantic);
        slice_mut_arg(out_instance, n, "out_instance")?.copy_from_slice(&seg.instance);
        Ok(())
    })
}
