//! C ABI over the harmorch library.
//!
//! Every fallible call returns an `int32_t` status (`HM_OK` on success) and
//! writes results through out-pointers. On failure, `hm_last_error` returns a
//! message for the calling thread. Handles are opaque and owned by the
//! caller; release each with its `_free` function. Panics never cross the
//! boundary: they are reported as `HM_ERR_PANIC`.

#![allow(clippy::missing_safety_doc)]

use harmorch::dissonance::{
    adjust_pitch_logits, d_total, AdjustContext, DissonanceError, DissonanceMatrix, DissonanceParams,
};
use harmorch::harmony::{analyze_skeleton, precision_recall, HarmonySkeleton, PcSet};
use harmorch::hiermodel::{load_checkpoint, save_checkpoint, HierModel, ModelConfig, ModelError};
use harmorch::metrics::evaluate;
use harmorch::pipeline::{generate_window, PipelineError, SamplingConfig};
use harmorch::score::{parse_midi, write_midi, MidiError, Score};
use harmorch::tokenizer::{encode, Capacity, TokenizeError};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

pub const HM_OK: i32 = 0;
/// A required pointer argument was null.
pub const HM_ERR_NULL: i32 = 1;
/// Malformed MIDI, JSON or checkpoint data.
pub const HM_ERR_PARSE: i32 = 2;
/// Too many tracks in a bar, or too many tokens for a cell.
pub const HM_ERR_CAPACITY: i32 = 3;
/// Input does not fit the model (window too long, duplicate track, ...).
pub const HM_ERR_SHAPE: i32 = 4;
/// An argument is out of range or inconsistent with another.
pub const HM_ERR_INVALID: i32 = 5;
pub const HM_ERR_IO: i32 = 6;
/// The output buffer is too small; the required size was written.
pub const HM_ERR_BUFFER_TOO_SMALL: i32 = 7;
pub const HM_ERR_PANIC: i32 = 8;
pub const HM_ERR_FAILED: i32 = 9;

/// Parsed score.
pub struct HmScore(Score);

/// Harmony skeleton: one chord label and tone set per beat.
pub struct HmSkeleton(HarmonySkeleton);

/// Hierarchical music model.
pub struct HmModel(HierModel);

/// Byte buffer allocated by the library; release with `hm_bytes_free`.
#[repr(C)]
pub struct HmBytes {
    pub data: *mut u8,
    pub len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmDissonance {
    pub total: f64,
    pub d_hn: f64,
    pub d_nn: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmSamplingParams {
    pub seed: u64,
    pub top_p: f64,
    pub temperature: f64,
    pub lambda_hn: f64,
    pub lambda_nn: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Fail(i32, String);

impl Fail {
    fn null(what: &str) -> Self {
        Fail(HM_ERR_NULL, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Fail(HM_ERR_INVALID, msg.into())
    }
}

impl From<MidiError> for Fail {
    fn from(e: MidiError) -> Self {
        let code = match e {
            MidiError::Parse { .. } => HM_ERR_PARSE,
            MidiError::Capacity { .. } => HM_ERR_CAPACITY,
        };
        Fail(code, e.to_string())
    }
}

impl From<ModelError> for Fail {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::Config(_) => HM_ERR_INVALID,
            ModelError::Shape(_) | ModelError::DuplicateTrack { .. } => HM_ERR_SHAPE,
            ModelError::Checkpoint(_) => HM_ERR_PARSE,
            ModelError::Io(_) => HM_ERR_IO,
        };
        Fail(code, e.to_string())
    }
}

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Midi(e) => e.into(),
            PipelineError::Model(e) => e.into(),
            PipelineError::WindowTooLong { .. } => Fail(HM_ERR_SHAPE, e.to_string()),
            PipelineError::Sampling(_) | PipelineError::Config(_) => Fail(HM_ERR_INVALID, e.to_string()),
            PipelineError::Io(_) => Fail(HM_ERR_IO, e.to_string()),
            e => Fail(HM_ERR_FAILED, e.to_string()),
        }
    }
}

impl From<TokenizeError> for Fail {
    fn from(e: TokenizeError) -> Self {
        let code = match e {
            TokenizeError::Overflow { .. } => HM_ERR_CAPACITY,
            TokenizeError::Invalid(_) => HM_ERR_INVALID,
        };
        Fail(code, e.to_string())
    }
}

impl From<DissonanceError> for Fail {
    fn from(e: DissonanceError) -> Self {
        Fail::invalid(e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(HM_ERR_PARSE, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HM_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            HM_ERR_PANIC
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::null(what))
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(Fail::null("data"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn string<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(Fail::null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail::invalid(format!("{what} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(HM_ERR_FAILED, "output holds a NUL byte".into()))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn hm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn hm_bytes_free(b: HmBytes) {
    if !b.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    }
}

// ---- scores ----

#[no_mangle]
pub unsafe extern "C" fn hm_score_from_midi(data: *const u8, len: usize, out_score: *mut *mut HmScore) -> i32 {
    guard(|| {
        let slot = out(out_score, "out_score")?;
        *slot = boxed(HmScore(parse_midi(bytes(data, len)?)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hm_score_to_midi(score: *const HmScore, out_midi: *mut HmBytes) -> i32 {
    guard(|| {
        let s = as_ref(score, "score")?;
        let slot = out(out_midi, "out_midi")?;
        let buf = write_midi(&s.0).into_boxed_slice();
        let len = buf.len();
        *slot = HmBytes {
            data: Box::into_raw(buf).cast::<u8>(),
            len,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hm_score_free(score: *mut HmScore) {
    if !score.is_null() {
        drop(Box::from_raw(score));
    }
}

/// Number of bars; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn hm_score_bar_count(score: *const HmScore) -> usize {
    score.as_ref().map_or(0, |s| s.0.bars.len())
}

/// Number of notes over all bars and tracks; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn hm_score_note_count(score: *const HmScore) -> usize {
    score.as_ref().map_or(0, |s| s.0.note_count())
}

/// Token ids of one track in one bar. Pass `capacity = 0` for no limit.
/// When `out_cap` is too small, `*out_len` receives the required length and
/// `HM_ERR_BUFFER_TOO_SMALL` is returned.
#[no_mangle]
pub unsafe extern "C" fn hm_score_tokenize(
    score: *const HmScore,
    bar: usize,
    track_id: u8,
    capacity: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> i32 {
    guard(|| {
        let s = as_ref(score, "score")?;
        let len_slot = out(out_len, "out_len")?;
        let b = s
            .0
            .bars
            .get(bar)
            .ok_or_else(|| Fail::invalid(format!("bar {bar} of {}", s.0.bars.len())))?;
        let tb = b
            .track(track_id)
            .ok_or_else(|| Fail::invalid(format!("bar {bar} has no track {track_id}")))?;
        let cap = if capacity == 0 { Capacity::Custom(usize::MAX) } else { Capacity::Custom(capacity) };
        let ids = encode(tb, b.bar_length, cap)?.ids();
        *len_slot = ids.len();
        if ids.len() > out_cap {
            return Err(Fail(HM_ERR_BUFFER_TOO_SMALL, format!("{} tokens, buffer holds {out_cap}", ids.len())));
        }
        if !ids.is_empty() {
            let dst = std::slice::from_raw_parts_mut(out_tokens.as_mut().ok_or_else(|| Fail::null("out_tokens"))?, ids.len());
            for (d, id) in dst.iter_mut().zip(ids) {
                *d = id as u32;
            }
        }
        Ok(())
    })
}

// ---- skeletons ----

#[no_mangle]
pub unsafe extern "C" fn hm_skeleton_analyze(score: *const HmScore, out_skeleton: *mut *mut HmSkeleton) -> i32 {
    guard(|| {
        let s = as_ref(score, "score")?;
        let slot = out(out_skeleton, "out_skeleton")?;
        *slot = boxed(HmSkeleton(analyze_skeleton(&s.0)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hm_skeleton_from_json(json: *const c_char, out_skeleton: *mut *mut HmSkeleton) -> i32 {
    guard(|| {
        let text = string(json, "json")?;
        let slot = out(out_skeleton, "out_skeleton")?;
        *slot = boxed(HmSkeleton(serde_json::from_str(text)?));
        Ok(())
    })
}

/// Skeleton as JSON; release the string with `hm_string_free`.
#[no_mangle]
pub unsafe extern "C" fn hm_skeleton_to_json(skeleton: *const HmSkeleton, out_json: *mut *mut c_char) -> i32 {
    guard(|| {
        let sk = as_ref(skeleton, "skeleton")?;
        let slot = out(out_json, "out_json")?;
        *slot = c_string(serde_json::to_string(&sk.0)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hm_skeleton_beat_count(skeleton: *const HmSkeleton) -> usize {
    skeleton.as_ref().map_or(0, |s| s.0.beats.len())
}

#[no_mangle]
pub unsafe extern "C" fn hm_skeleton_free(skeleton: *mut HmSkeleton) {
    if !skeleton.is_null() {
        drop(Box::from_raw(skeleton));
    }
}

// ---- scoring ----

/// Dissonance of `score` against `skeleton` with the default interval weights.
#[no_mangle]
pub unsafe extern "C" fn hm_dissonance(
    score: *const HmScore,
    skeleton: *const HmSkeleton,
    lambda_hn: f64,
    lambda_nn: f64,
    out_d: *mut HmDissonance,
) -> i32 {
    guard(|| {
        let s = as_ref(score, "score")?;
        let sk = as_ref(skeleton, "skeleton")?;
        let slot = out(out_d, "out_d")?;
        if !(lambda_hn >= 0.0 && lambda_nn >= 0.0 && lambda_hn.is_finite() && lambda_nn.is_finite()) {
            return Err(Fail::invalid("lambdas must be finite and non-negative"));
        }
        let d = d_total(&s.0, &sk.0, DissonanceParams::new(lambda_hn, lambda_nn), &DissonanceMatrix::default())?;
        *slot = HmDissonance {
            total: d.total,
            d_hn: d.d_hn,
            d_nn: d.d_nn,
        };
        Ok(())
    })
}

/// Chord precision and recall of `generated` against `reference`.
#[no_mangle]
pub unsafe extern "C" fn hm_precision_recall(
    reference: *const HmSkeleton,
    generated: *const HmSkeleton,
    out_precision: *mut f64,
    out_recall: *mut f64,
) -> i32 {
    guard(|| {
        let r = as_ref(reference, "reference")?;
        let g = as_ref(generated, "generated")?;
        let p = out(out_precision, "out_precision")?;
        let q = out(out_recall, "out_recall")?;
        (*p, *q) = precision_recall(&r.0, &g.0).map_err(|e| Fail::invalid(e.to_string()))?;
        Ok(())
    })
}

/// All window metrics as a JSON object; `reference` may be null.
#[no_mangle]
pub unsafe extern "C" fn hm_metrics_json(
    score: *const HmScore,
    reference: *const HmSkeleton,
    out_json: *mut *mut c_char,
) -> i32 {
    guard(|| {
        let s = as_ref(score, "score")?;
        let slot = out(out_json, "out_json")?;
        let r = evaluate(
            &s.0,
            reference.as_ref().map(|r| &r.0),
            DissonanceParams::default(),
            &DissonanceMatrix::default(),
        );
        *slot = c_string(serde_json::to_string(&r)?)?;
        Ok(())
    })
}

/// Shifts the 128 pitch logits (ids 0..128 of `logits`) away from notes that
/// clash with `active`, keeping total pitch probability unchanged.
/// `allowed_pcs` is a 12-bit pitch-class mask, bit 0 = C.
#[no_mangle]
pub unsafe extern "C" fn hm_adjust_pitch_logits(
    logits: *mut f64,
    len: usize,
    active: *const u8,
    active_len: usize,
    allowed_pcs: u16,
    lambda_hn: f64,
    lambda_nn: f64,
) -> i32 {
    guard(|| {
        if logits.is_null() {
            return Err(Fail::null("logits"));
        }
        if len < 128 {
            return Err(Fail::invalid(format!("{len} logits, need at least 128")));
        }
        let active = bytes(active, active_len)?;
        if active.iter().any(|&p| p > 127) {
            return Err(Fail::invalid("active pitch above 127"));
        }
        if allowed_pcs >= 1 << 12 {
            return Err(Fail::invalid("allowed_pcs uses more than 12 bits"));
        }
        let logits = std::slice::from_raw_parts_mut(logits, len);
        let table = DissonanceMatrix::default().pitch_table();
        adjust_pitch_logits(
            logits,
            &AdjustContext {
                active,
                allowed: PcSet(allowed_pcs),
                params: DissonanceParams::new(lambda_hn, lambda_nn),
                weights: &table,
            },
        );
        Ok(())
    })
}

// ---- model ----

/// Freshly initialized model with the small desk configuration.
#[no_mangle]
pub unsafe extern "C" fn hm_model_new_desk(out_model: *mut *mut HmModel) -> i32 {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = boxed(HmModel(HierModel::new(ModelConfig::desk())?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hm_model_load(path: *const c_char, out_model: *mut *mut HmModel) -> i32 {
    guard(|| {
        let p = string(path, "path")?;
        let slot = out(out_model, "out_model")?;
        *slot = boxed(HmModel(load_checkpoint(Path::new(p))?.model));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hm_model_save(model: *const HmModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = as_ref(model, "model")?;
        save_checkpoint(Path::new(string(path, "path")?), &m.0, None)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hm_model_free(model: *mut HmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Library defaults for sampling.
#[no_mangle]
pub extern "C" fn hm_sampling_defaults() -> HmSamplingParams {
    let d = SamplingConfig::default();
    HmSamplingParams {
        seed: d.seed,
        top_p: d.top_p,
        temperature: d.temperature,
        lambda_hn: d.params.lambda_hn,
        lambda_nn: d.params.lambda_nn,
    }
}

/// Generates one window of music over `skeleton`. Equal seeds give equal
/// output.
#[no_mangle]
pub unsafe extern "C" fn hm_generate(
    model: *const HmModel,
    skeleton: *const HmSkeleton,
    params: *const HmSamplingParams,
    out_score: *mut *mut HmScore,
) -> i32 {
    guard(|| {
        let m = as_ref(model, "model")?;
        let sk = as_ref(skeleton, "skeleton")?;
        let p = as_ref(params, "params")?;
        let slot = out(out_score, "out_score")?;
        let cfg = SamplingConfig {
            seed: p.seed,
            top_p: p.top_p,
            temperature: p.temperature,
            params: DissonanceParams::new(p.lambda_hn, p.lambda_nn),
            ..Default::default()
        };
        *slot = boxed(HmScore(generate_window(&m.0, &sk.0, &cfg)?.score));
        Ok(())
    })
}
