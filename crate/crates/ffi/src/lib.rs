//! C ABI over `dre_core`: load a checkpoint, score candidate relations for a
//! query given as JSON, and decode trigger spans.
//!
//! Every function returns a [`DreStatus`]; on failure the message is
//! available from [`dre_last_error`] on the same thread. Strings handed out
//! by the library must be released with [`dre_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dre_core::corpus::{Dialogue, RelationSplit};
use dre_core::inference::{rank, score_candidates, InferenceMode, Query};
use dre_core::model::Model;
use dre_core::trigger_head::{decode_span, SpanLogits};
use dre_core::{checkpoint, Error};
use serde_json::Value;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DreStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    InvalidArgument = 6,
    UnknownRelation = 7,
    Internal = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct DreModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    let c = CString::new(text).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> DreStatus {
    match e {
        Error::Io { .. } => DreStatus::Io,
        Error::Parse { .. } | Error::Json(_) => DreStatus::Parse,
        Error::Checkpoint(_) | Error::MissingWeights(_) | Error::Shape(_) => DreStatus::Checkpoint,
        Error::UnknownRelation(_) => DreStatus::UnknownRelation,
        Error::NonFiniteLoss { .. } => DreStatus::Internal,
        _ => DreStatus::InvalidArgument,
    }
}

struct Failure(DreStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DreStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DreStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside dre");
            DreStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DreStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(DreStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn bad(message: impl Into<String>) -> Failure {
    Failure(DreStatus::InvalidArgument, message.into())
}

/// Loads a checkpoint. `split_path` may be null to keep the split stored in
/// the checkpoint. On success `*out` owns a handle to pass to
/// [`dre_model_free`].
///
/// # Safety
/// `path` and a non-null `split_path` must be NUL-terminated strings; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dre_model_load(
    path: *const c_char,
    split_path: *const c_char,
    out: *mut *mut DreModel,
) -> DreStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(DreStatus::NullPointer, "out is null".into()));
        }
        // SAFETY: forwarded caller contract.
        let path = unsafe { str_arg(path, "path") }?;
        let mut model = checkpoint::load(Path::new(path))?;
        if !split_path.is_null() {
            // SAFETY: forwarded caller contract.
            let split = unsafe { str_arg(split_path, "split_path") }?;
            model.split = RelationSplit::load(Path::new(split))?;
        }
        let handle = Box::into_raw(Box::new(DreModel { model }));
        // SAFETY: `out` checked non-null.
        unsafe { *out = handle };
        Ok(())
    })
}

/// Releases a handle from [`dre_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`dre_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dre_model_free(model: *mut DreModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

fn score_request(model: &Model, request: &str) -> Result<String, Failure> {
    let v: Value = serde_json::from_str(request).map_err(Error::from)?;
    let text = |key: &str| -> Result<String, Failure> {
        v.get(key)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| bad(format!("request field `{key}` must be a string")))
    };
    let turns: Vec<String> = serde_json::from_value(v.get("dialogue").cloned().unwrap_or(Value::Null))
        .map_err(|_| bad("request field `dialogue` must be a list of turns"))?;
    let mode: InferenceMode = match v.get("mode") {
        None => InferenceMode::GeneralEmbedding,
        Some(m) => m.as_str().ok_or_else(|| bad("`mode` must be a string"))?.parse()?,
    };
    let candidates: Vec<String> = match v.get("candidates") {
        None => model.split.all(),
        Some(c) => serde_json::from_value(c.clone()).map_err(|_| bad("`candidates` must be a list of strings"))?,
    };
    let k = match v.get("k") {
        None => 1,
        Some(k) => k.as_u64().ok_or_else(|| bad("`k` must be a non-negative integer"))? as usize,
    };
    let gold_trigger = match v.get("gold_trigger") {
        None | Some(Value::Null) => None,
        Some(t) => Some(t.as_str().ok_or_else(|| bad("`gold_trigger` must be a string"))?.to_string()),
    };
    let dialogue = Dialogue::new("ffi", turns)?;
    let query = Query {
        id: "0".into(),
        dialogue_id: "ffi".into(),
        subject: text("subject")?,
        object: text("object")?,
        gold_relations: Vec::new(),
        gold_trigger,
    };
    let scores = score_candidates(model, &dialogue, &query, &candidates, mode)?;
    let ranked = rank(&query.id, mode, scores, k)?;
    Ok(serde_json::to_string(&ranked).map_err(Error::from)?)
}

/// Scores the candidates of one query. The request is a JSON object with
/// `dialogue` (list of turns), `subject`, `object`, and optional `mode`,
/// `candidates`, `k` and `gold_trigger`. `*out_json` receives the ranked
/// prediction as JSON.
///
/// # Safety
/// `model` must be a live handle, `request_json` a NUL-terminated string and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dre_score_json(
    model: *const DreModel,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> DreStatus {
    guard(|| {
        if model.is_null() || out_json.is_null() {
            return Err(Failure(DreStatus::NullPointer, "model or out_json is null".into()));
        }
        // SAFETY: forwarded caller contract.
        let request = unsafe { str_arg(request_json, "request_json") }?;
        // SAFETY: live handle per caller contract.
        let model = unsafe { &(*model).model };
        let json = score_request(model, request)?;
        let c = CString::new(json).map_err(|_| Failure(DreStatus::Internal, "NUL in output".into()))?;
        // SAFETY: `out_json` checked non-null.
        unsafe { *out_json = c.into_raw() };
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dre_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into the library from the same thread.
#[no_mangle]
pub extern "C" fn dre_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Best trigger span for `len` start/end logits. `mask[i] != 0` marks
/// positions a span may cover; index 0 is the no-trigger span `(0, 0)`.
///
/// # Safety
/// `start`, `end` and `mask` must point to `len` elements; `out_start` and
/// `out_end` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dre_decode_span(
    start: *const f64,
    end: *const f64,
    mask: *const u8,
    len: usize,
    max_span_len: usize,
    out_start: *mut usize,
    out_end: *mut usize,
) -> DreStatus {
    guard(|| {
        if start.is_null() || end.is_null() || mask.is_null() || out_start.is_null() || out_end.is_null() {
            return Err(Failure(DreStatus::NullPointer, "null argument".into()));
        }
        if len == 0 {
            return Err(bad("len must be positive"));
        }
        if max_span_len == 0 {
            return Err(bad("max_span_len must be positive"));
        }
        // SAFETY: caller guarantees `len` readable elements each.
        let (s, e, m) = unsafe {
            (
                std::slice::from_raw_parts(start, len),
                std::slice::from_raw_parts(end, len),
                std::slice::from_raw_parts(mask, len),
            )
        };
        let logits = SpanLogits {
            start: s.to_vec(),
            end: e.to_vec(),
            mask: m.iter().map(|&b| b != 0).collect(),
        };
        let span = decode_span(&logits, max_span_len);
        // SAFETY: outputs checked non-null.
        unsafe {
            *out_start = span.start;
            *out_end = span.end;
        }
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dre_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
