//! C ABI over avloc-core.
//!
//! Every entry point returns an [`AvlocStatus`]. On failure the message is
//! kept per thread and can be fetched with [`avloc_last_error_message`].
//! Strings handed out by this library must be released with
//! [`avloc_string_free`]; engines with [`avloc_engine_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use avloc_core::client::{Client, ReplayBackend};
use avloc_core::dataset::parse_manifest;
use avloc_core::geometry::{validate_box, BoundingBox, GeometryError, ImageDims, RefinementOp};
use avloc_core::harness::{evaluate, read_results};
use avloc_core::metrics::ClassMatcher;
use avloc_core::pipeline::{Pipeline, PipelineConfig, SampleResult, Thresholds};
use avloc_core::schemas::{parse_text, StageTag};
use serde_json::json;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvlocStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DegenerateBox = 4,
    ParseError = 5,
    IoError = 6,
    Panic = 7,
}

/// Box corners in pixels, `(x1, y1)` top-left.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvlocBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<BoundingBox> for AvlocBox {
    fn from(b: BoundingBox) -> Self {
        let [x1, y1, x2, y2] = b.to_array();
        Self { x1, y1, x2, y2 }
    }
}

/// A pipeline bound to a replay store.
pub struct AvlocEngine {
    pipeline: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(AvlocStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: AvlocStatus, msg: impl ToString) -> FfiResult<T> {
    Err(Failure(status, msg.to_string()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> AvlocStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvlocStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AvlocStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(AvlocStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(AvlocStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .map_or_else(|| fail(AvlocStatus::NullArgument, format!("{name} is null")), Ok)
}

fn out_string(out: &mut *mut c_char, s: String) -> FfiResult<()> {
    *out = CString::new(s)
        .or_else(|e| fail(AvlocStatus::InvalidArgument, e))?
        .into_raw();
    Ok(())
}

fn geometry(e: GeometryError) -> Failure {
    let status = match e {
        GeometryError::DegenerateBox(..) => AvlocStatus::DegenerateBox,
        _ => AvlocStatus::InvalidArgument,
    };
    Failure(status, e.to_string())
}

fn dims(width: u32, height: u32) -> FfiResult<ImageDims> {
    ImageDims::new(width, height).map_err(geometry)
}

fn to_box(b: &AvlocBox, d: ImageDims) -> FfiResult<BoundingBox> {
    validate_box([b.x1, b.y1, b.x2, b.y2], d).map_err(geometry)
}

/// Message for the most recent failure on this thread, or null. The caller
/// owns the returned string.
#[no_mangle]
pub extern "C" fn avloc_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn avloc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Clamps `raw` into a `width` x `height` image and checks it is non-empty.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_box_validate(raw: AvlocBox, width: u32, height: u32, out: *mut AvlocBox) -> AvlocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = to_box(&raw, dims(width, height)?)?.into();
        Ok(())
    })
}

/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_iou(a: AvlocBox, b: AvlocBox, out: *mut f64) -> AvlocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ba = BoundingBox::new(a.x1, a.y1, a.x2, a.y2).map_err(geometry)?;
        let bb = BoundingBox::new(b.x1, b.y1, b.x2, b.y2).map_err(geometry)?;
        *out = avloc_core::iou(&ba, &bb);
        Ok(())
    })
}

unsafe fn apply_op(b: AvlocBox, op: RefinementOp, width: u32, height: u32, out: *mut AvlocBox) -> AvlocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = dims(width, height)?;
        let bx = to_box(&b, d)?;
        *out = op.apply(&bx, d).map_err(geometry)?.bbox.into();
        Ok(())
    })
}

/// Shifts the box by `(dx, dy)` and each side by its own offset.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn avloc_box_delta(
    b: AvlocBox,
    dx: f64,
    dy: f64,
    d_l: f64,
    d_r: f64,
    d_t: f64,
    d_b: f64,
    width: u32,
    height: u32,
    out: *mut AvlocBox,
) -> AvlocStatus {
    let op = RefinementOp::Delta {
        dx,
        dy,
        d_l,
        d_r,
        d_t,
        d_b,
    };
    apply_op(b, op, width, height, out)
}

/// Grows every side by `a`; negative `a` shrinks.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_box_expand_shrink(b: AvlocBox, a: f64, width: u32, height: u32, out: *mut AvlocBox) -> AvlocStatus {
    apply_op(b, RefinementOp::ExpandShrink { a }, width, height, out)
}

/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_box_recenter(
    b: AvlocBox,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    out: *mut AvlocBox,
) -> AvlocStatus {
    apply_op(b, RefinementOp::Recenter { cx, cy }, width, height, out)
}

/// Extracts and repairs a model reply for `stage` (`gen_loc`, `gen_aud`,
/// `gen_aud_multi`, `analysis`, `anchors` or `refine`). Writes
/// `{"reply": ..., "repair_notes": [...]}`.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out_json` must be null
/// or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_parse_reply(stage: *const c_char, raw: *const c_char, out_json: *mut *mut c_char) -> AvlocStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let stage_s = str_arg(stage, "stage")?;
        let raw = str_arg(raw, "raw")?;
        let Some(tag) = StageTag::parse(stage_s) else {
            return fail(AvlocStatus::InvalidArgument, format!("unknown stage `{stage_s}`"));
        };
        let (reply, notes) = parse_text(tag, raw).or_else(|e| fail(AvlocStatus::ParseError, e))?;
        out_string(out, json!({"reply": reply.to_value(), "repair_notes": notes}).to_string())
    })
}

/// Builds an engine answering from the replay store at `store_path`.
/// `config_json` holds pipeline settings (`n`, `tau_av`, `variant`, ...);
/// null means defaults.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be null or
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_engine_new_replay(
    config_json: *const c_char,
    store_path: *const c_char,
    out: *mut *mut AvlocEngine,
) -> AvlocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let cfg: PipelineConfig = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).or_else(|e| fail(AvlocStatus::InvalidArgument, e))?
        };
        cfg.validate().or_else(|e| fail(AvlocStatus::InvalidArgument, e))?;
        let store = str_arg(store_path, "store_path")?;
        let backend = ReplayBackend::open(Path::new(store)).or_else(|e| fail(AvlocStatus::IoError, e))?;
        let client = Arc::new(Client::new(Arc::new(backend)));
        let pipeline = Pipeline::with_builtin_templates(cfg, client);
        *out = Box::into_raw(Box::new(AvlocEngine { pipeline }));
        Ok(())
    })
}

/// Runs one manifest line, resolving media paths against `base_dir`, and
/// writes the result record as JSON. A sample whose stages failed still
/// returns `Ok`; its `status` field says `failed`.
///
/// # Safety
/// `engine` must come from [`avloc_engine_new_replay`]; strings must be null
/// or NUL-terminated; `out_json` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_engine_run_sample(
    engine: *const AvlocEngine,
    manifest_line: *const c_char,
    base_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> AvlocStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let Some(engine) = engine.as_ref() else {
            return fail(AvlocStatus::NullArgument, "engine is null");
        };
        let line = str_arg(manifest_line, "manifest_line")?;
        let base = str_arg(base_dir, "base_dir")?;
        let samples = parse_manifest(line, Path::new(base)).or_else(|e| fail(AvlocStatus::InvalidArgument, e))?;
        let [sample] = samples.as_slice() else {
            return fail(AvlocStatus::InvalidArgument, format!("expected one sample, got {}", samples.len()));
        };
        let result = engine.pipeline.run_sample(sample);
        out_string(out, serde_json::to_string(&result).expect("result serializes"))
    })
}

/// # Safety
/// `engine` must be null or come from [`avloc_engine_new_replay`], freed once.
#[no_mangle]
pub unsafe extern "C" fn avloc_engine_free(engine: *mut AvlocEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Scores a results file against a manifest file with default thresholds
/// and writes the reports as JSON.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out_json` must be null
/// or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn avloc_evaluate(
    results_path: *const c_char,
    manifest_path: *const c_char,
    out_json: *mut *mut c_char,
) -> AvlocStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let results: Vec<SampleResult> = read_results(Path::new(str_arg(results_path, "results_path")?))
            .or_else(|e| fail(AvlocStatus::IoError, e))?;
        let manifest = avloc_core::dataset::load_manifest(Path::new(str_arg(manifest_path, "manifest_path")?))
            .or_else(|e| fail(AvlocStatus::IoError, e))?;
        let set = evaluate(&results, &manifest, None, &ClassMatcher::default(), Thresholds::default())
            .or_else(|e| fail(AvlocStatus::InvalidArgument, e))?;
        out_string(out, serde_json::to_string(&set).expect("report serializes"))
    })
}
