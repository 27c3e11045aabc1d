//! C ABI over `iou_uniform`.
//!
//! Every fallible function returns an [`IuStatus`]; on failure a message is available
//! from [`iu_last_error_message`] on the same thread. Sample sets and head models are
//! opaque handles that must be released with their `_free` function.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;
use std::ptr;

use iou_uniform::boxgeom::{self, BBox, Deltas};
use iou_uniform::cli::load_model;
use iou_uniform::infer::{self, Detection, Ranking};
use iou_uniform::loss;
use iou_uniform::rng::seeded;
use iou_uniform::sampler::{generate_uniform_samples, GenerateOptions, IntervalConfig, JitterRanges, SampleSet};
use iou_uniform::toyhead::{HeadKind, HeadModel, ModelDocument};
use iou_uniform::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Format = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IuRanking {
    Cls = 0,
    Fused = 1,
}

/// Center-form box.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IuBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IuDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IuSample {
    pub bbox: IuBox,
    pub gt_index: usize,
    pub iou: f64,
    pub interval: usize,
}

/// NMS input. The fused score is `cls_score * iou_pred`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IuDetection {
    pub bbox: IuBox,
    pub class_id: usize,
    pub cls_score: f64,
    pub iou_pred: f64,
}

/// Opaque set of generated samples.
pub struct IuSampleSet {
    inner: SampleSet,
}

/// Opaque trained head.
pub struct IuHeadModel {
    inner: HeadModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: IuStatus, msg: impl Into<String>) -> IuStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> IuStatus {
    match e {
        Error::Io { .. } => IuStatus::Io,
        Error::Format { .. } => IuStatus::Format,
        Error::IouOutOfRange { .. } => IuStatus::OutOfRange,
        _ => IuStatus::InvalidArgument,
    }
}

fn from_error(e: Error) -> IuStatus {
    let s = status_of(&e);
    let mut msg = e.to_string();
    let mut src = std::error::Error::source(&e);
    while let Some(c) = src {
        msg.push_str(": ");
        msg.push_str(&c.to_string());
        src = c.source();
    }
    fail(s, msg)
}

fn guard(f: impl FnOnce() -> IuStatus + UnwindSafe) -> IuStatus {
    catch_unwind(f).unwrap_or_else(|_| fail(IuStatus::Internal, "internal panic"))
}

impl From<IuBox> for BBox {
    fn from(b: IuBox) -> Self {
        BBox::new(b.cx, b.cy, b.w, b.h)
    }
}

impl From<BBox> for IuBox {
    fn from(b: BBox) -> Self {
        IuBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

impl From<IuDeltas> for Deltas {
    fn from(d: IuDeltas) -> Self {
        Deltas::new(d.dx, d.dy, d.dw, d.dh)
    }
}

impl From<Deltas> for IuDeltas {
    fn from(d: Deltas) -> Self {
        IuDeltas {
            dx: d.dx,
            dy: d.dy,
            dw: d.dw,
            dh: d.dh,
        }
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn iu_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `a`, `b` and `out` must be NULL or valid pointers.
#[no_mangle]
pub unsafe extern "C" fn iu_iou(a: *const IuBox, b: *const IuBox, out: *mut f64) -> IuStatus {
    guard(|| {
        let (Some(a), Some(b), Some(out)) = (a.as_ref(), b.as_ref(), out.as_mut()) else {
            return fail(IuStatus::NullPointer, "iu_iou: null argument");
        };
        match boxgeom::iou(&(*a).into(), &(*b).into()) {
            Ok(v) => {
                *out = v;
                IuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Regression deltas taking `roi` onto `gt`.
///
/// # Safety
/// All pointers must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn iu_encode_deltas(roi: *const IuBox, gt: *const IuBox, out: *mut IuDeltas) -> IuStatus {
    guard(|| {
        let (Some(roi), Some(gt), Some(out)) = (roi.as_ref(), gt.as_ref(), out.as_mut()) else {
            return fail(IuStatus::NullPointer, "iu_encode_deltas: null argument");
        };
        match boxgeom::encode_deltas(&(*roi).into(), &(*gt).into()) {
            Ok(d) => {
                *out = d.into();
                IuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Applies `d` to `roi`; log-size deltas are clamped as in the library.
///
/// # Safety
/// All pointers must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn iu_apply_deltas(roi: *const IuBox, d: *const IuDeltas, out: *mut IuBox) -> IuStatus {
    guard(|| {
        let (Some(roi), Some(d), Some(out)) = (roi.as_ref(), d.as_ref(), out.as_mut()) else {
            return fail(IuStatus::NullPointer, "iu_apply_deltas: null argument");
        };
        let r: BBox = (*roi).into();
        if let Err(e) = r.validate() {
            return from_error(e);
        }
        *out = boxgeom::apply_deltas(&r, &(*d).into()).into();
        IuStatus::Ok
    })
}

/// Smooth-L1 value, and its derivative when `grad` is not NULL.
///
/// # Safety
/// `value` must be valid; `grad` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn iu_smooth_l1(x: f64, beta: f64, value: *mut f64, grad: *mut f64) -> IuStatus {
    guard(|| {
        let Some(value) = value.as_mut() else {
            return fail(IuStatus::NullPointer, "iu_smooth_l1: null value pointer");
        };
        if !(beta > 0.0) {
            return fail(IuStatus::InvalidArgument, format!("beta {beta} must be positive"));
        }
        let (v, g) = loss::smooth_l1(x, beta);
        *value = v;
        if let Some(grad) = grad.as_mut() {
            *grad = g;
        }
        IuStatus::Ok
    })
}

/// Interval-weighted smooth-L1 regression loss over `n` samples. `weights` holds one
/// weight per interval; `per_interval` may be NULL or hold `n_intervals` outputs.
///
/// # Safety
/// Array pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn iu_weighted_reg_loss(
    preds: *const IuDeltas,
    targets: *const IuDeltas,
    intervals: *const usize,
    n: usize,
    weights: *const f64,
    n_intervals: usize,
    beta: f64,
    total: *mut f64,
    per_interval: *mut f64,
) -> IuStatus {
    guard(|| {
        if total.is_null()
            || weights.is_null()
            || (n > 0 && (preds.is_null() || targets.is_null() || intervals.is_null()))
        {
            return fail(IuStatus::NullPointer, "iu_weighted_reg_loss: null argument");
        }
        if n_intervals == 0 {
            return fail(IuStatus::InvalidArgument, "n_intervals must be at least 1");
        }
        let slice = |p: *const IuDeltas| {
            if n == 0 {
                &[][..]
            } else {
                std::slice::from_raw_parts(p, n)
            }
        };
        let p: Vec<Deltas> = slice(preds).iter().map(|&d| d.into()).collect();
        let t: Vec<Deltas> = slice(targets).iter().map(|&d| d.into()).collect();
        let iv = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(intervals, n)
        };
        // only the weights matter to the loss; boundaries just fix the interval count
        let cfg = IntervalConfig {
            boundaries: (0..=n_intervals)
                .map(|k| 0.5 + 0.5 * k as f64 / n_intervals as f64)
                .collect(),
            samples_per_interval: 1,
            weights: std::slice::from_raw_parts(weights, n_intervals).to_vec(),
        };
        match loss::weighted_reg_loss(&p, &t, iv, &cfg, beta) {
            Ok(r) => {
                *total = r.total;
                if !per_interval.is_null() {
                    std::slice::from_raw_parts_mut(per_interval, n_intervals).copy_from_slice(&r.per_interval);
                }
                IuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Greedy class-wise NMS. Writes kept input indices, in rank order, to `keep` (capacity
/// `n`) and their count to `n_kept`.
///
/// # Safety
/// `dets` must hold `n` detections and `keep` room for `n` indices.
#[no_mangle]
pub unsafe extern "C" fn iu_nms(
    dets: *const IuDetection,
    n: usize,
    iou_threshold: f64,
    ranking: IuRanking,
    keep: *mut usize,
    n_kept: *mut usize,
) -> IuStatus {
    guard(|| {
        if n_kept.is_null() || (n > 0 && (dets.is_null() || keep.is_null())) {
            return fail(IuStatus::NullPointer, "iu_nms: null argument");
        }
        let input = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(dets, n)
        };
        let ranking = match ranking {
            IuRanking::Cls => Ranking::Cls,
            IuRanking::Fused => Ranking::Fused,
        };
        let ds: Vec<Detection> = input
            .iter()
            .map(|d| {
                let b: BBox = d.bbox.into();
                Detection {
                    bbox: b,
                    source_proposal: b,
                    class_id: d.class_id,
                    cls_score: d.cls_score,
                    iou_pred: d.iou_pred,
                    fused_score: d.cls_score,
                    refined: true,
                }
                .with_iou(d.iou_pred, ranking)
            })
            .collect();
        match infer::nms_indices(&ds, iou_threshold, ranking) {
            Ok(k) => {
                if n > 0 {
                    std::slice::from_raw_parts_mut(keep, n)[..k.len()].copy_from_slice(&k);
                }
                *n_kept = k.len();
                IuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Generates IoU-uniform samples around `n_gts` boxes with the default intervals,
/// jitter ranges and attempt budget.
///
/// # Safety
/// `gts` must hold `n_gts` boxes; `out` must be valid. The handle is released with
/// [`iu_sample_set_free`].
#[no_mangle]
pub unsafe extern "C" fn iu_sample_set_generate(
    gts: *const IuBox,
    n_gts: usize,
    seed: u64,
    out: *mut *mut IuSampleSet,
) -> IuStatus {
    guard(|| {
        if out.is_null() || (n_gts > 0 && gts.is_null()) {
            return fail(IuStatus::NullPointer, "iu_sample_set_generate: null argument");
        }
        *out = ptr::null_mut();
        let boxes: Vec<BBox> = if n_gts == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(gts, n_gts)
                .iter()
                .map(|&b| b.into())
                .collect()
        };
        if let Some(e) = boxes.iter().find_map(|b| b.validate().err()) {
            return from_error(e);
        }
        let cfg = IntervalConfig::default();
        let opts = GenerateOptions::for_config(&cfg);
        match generate_uniform_samples(&boxes, &cfg, &JitterRanges::default(), &mut seeded(seed), &opts) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(IuSampleSet { inner: set }));
                IuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iu_sample_set_len(set: *const IuSampleSet) -> usize {
    set.as_ref().map_or(0, |s| s.inner.samples.len())
}

/// Number of `(gt, interval)` pairs that ran out of attempts.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iu_sample_set_shortfalls(set: *const IuSampleSet) -> usize {
    set.as_ref().map_or(0, |s| s.inner.shortfalls.len())
}

/// # Safety
/// `set` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn iu_sample_set_get(set: *const IuSampleSet, index: usize, out: *mut IuSample) -> IuStatus {
    let (Some(set), Some(out)) = (set.as_ref(), out.as_mut()) else {
        return fail(IuStatus::NullPointer, "iu_sample_set_get: null argument");
    };
    let Some(s) = set.inner.samples.get(index) else {
        return fail(
            IuStatus::OutOfRange,
            format!("index {index} >= {}", set.inner.samples.len()),
        );
    };
    *out = IuSample {
        bbox: s.bbox.into(),
        gt_index: s.gt_index,
        iou: s.iou,
        interval: s.interval,
    };
    IuStatus::Ok
}

/// # Safety
/// `set` must be NULL or a handle from [`iu_sample_set_generate`] not freed before.
#[no_mangle]
pub unsafe extern "C" fn iu_sample_set_free(set: *mut IuSampleSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, IuStatus> {
    if p.is_null() {
        return Err(fail(IuStatus::NullPointer, format!("{what}: null string")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(IuStatus::InvalidArgument, format!("{what}: string is not UTF-8")))
}

/// Loads a model file written by the `train` or `reproduce` commands.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn iu_head_model_load(path: *const c_char, out: *mut *mut IuHeadModel) -> IuStatus {
    guard(|| {
        if out.is_null() {
            return fail(IuStatus::NullPointer, "iu_head_model_load: null out pointer");
        }
        *out = ptr::null_mut();
        let path = match c_str(path, "iu_head_model_load") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_model(Path::new(path)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(IuHeadModel { inner: m }));
                IuStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Parses a model document from a JSON string.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn iu_head_model_from_json(json: *const c_char, out: *mut *mut IuHeadModel) -> IuStatus {
    guard(|| {
        if out.is_null() {
            return fail(IuStatus::NullPointer, "iu_head_model_from_json: null out pointer");
        }
        *out = ptr::null_mut();
        let text = match c_str(json, "iu_head_model_from_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let doc: ModelDocument = match serde_json::from_str(text) {
            Ok(d) => d,
            Err(e) => return fail(IuStatus::Format, e.to_string()),
        };
        match HeadModel::from_document(&doc) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(IuHeadModel { inner: m }));
                IuStatus::Ok
            }
            Err(e) => fail(IuStatus::Format, e.to_string()),
        }
    })
}

/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iu_head_model_input_dim(m: *const IuHeadModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.input_dim)
}

/// 4 for a regressor, 1 for an IoU predictor, 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iu_head_model_output_dim(m: *const IuHeadModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.output_dim())
}

/// True for an IoU predictor.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iu_head_model_is_iou_predictor(m: *const IuHeadModel) -> bool {
    m.as_ref().is_some_and(|m| m.inner.kind == HeadKind::IouPredictor)
}

/// Forward pass on a raw network input (scaled geometric part then appearance).
/// Regressors write four deltas, IoU predictors one value in `[0, 1]`.
///
/// # Safety
/// `input` must hold `input_len` values and `output` room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn iu_head_model_predict(
    m: *const IuHeadModel,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> IuStatus {
    guard(|| {
        let Some(m) = m.as_ref() else {
            return fail(IuStatus::NullPointer, "iu_head_model_predict: null model");
        };
        if input.is_null() || output.is_null() {
            return fail(IuStatus::NullPointer, "iu_head_model_predict: null buffer");
        }
        let m = &m.inner;
        if input_len != m.input_dim || output_len < m.output_dim() {
            return fail(
                IuStatus::InvalidArgument,
                format!(
                    "expected input length {} and output room for {}",
                    m.input_dim,
                    m.output_dim()
                ),
            );
        }
        let y = m.forward(std::slice::from_raw_parts(input, input_len));
        std::slice::from_raw_parts_mut(output, y.len()).copy_from_slice(&y);
        IuStatus::Ok
    })
}

/// # Safety
/// `m` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn iu_head_model_free(m: *mut IuHeadModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
