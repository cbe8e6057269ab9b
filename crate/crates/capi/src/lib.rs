//! C ABI for the recpipe core library.
//!
//! Conventions, mirrored in `include/recpipe.h`:
//! - handles (`RpTemplates`, `RpIndex`) are opaque; create/free in pairs;
//! - fallible functions return an [`RpStatus`] code and write results
//!   through out-parameters;
//! - returned strings are NUL-terminated, owned by the caller, and freed
//!   with `rp_string_free`;
//! - `rp_last_error_message` returns a thread-local description of the most
//!   recent failure on the calling thread.
//!
//! Structured results (match lists, metric reports) cross the boundary as
//! JSON strings; item ids and scores stay individually addressable on the
//! Rust side for callers that want the typed API instead.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_float, CStr, CString};
use std::path::Path;
use std::ptr;

use recpipe_core::evaluator::{hit_rate_at_k, mae, ndcg_at_k, parse_rating, rmse};
use recpipe_core::matcher::{build_index, match_top, Embedder, ItemIndex, NgramHashEmbedder};
use recpipe_core::model::{read_jsonl, Item, UserHistory};
use recpipe_core::template::{FieldSet, TemplateSet};

/// Status codes for every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseFailure = 4,
    Io = 5,
    NotFound = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let owned = CString::new(message.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(owned));
}

fn fail(status: RpStatus, message: impl Into<String>) -> RpStatus {
    set_error(message);
    status
}

/// Most recent error message on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn rp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map(|s| s.as_ptr()).unwrap_or(ptr::null())
    })
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn rp_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Frees a string returned through an out-parameter.
///
/// # Safety
/// `ptr` must be null or a pointer previously returned by this library
/// through a `char**` out-parameter, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rp_string_free(ptr: *mut c_char) {
    if !ptr.is_null() {
        drop(CString::from_raw(ptr));
    }
}

unsafe fn require_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, RpStatus> {
    if ptr.is_null() {
        return Err(fail(RpStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(RpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn give_string(out: *mut *mut c_char, text: String) -> RpStatus {
    match CString::new(text) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            RpStatus::Ok
        }
        Err(_) => fail(RpStatus::Internal, "result contained an interior NUL byte"),
    }
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Opaque handle around a loaded template set.
pub struct RpTemplates {
    set: TemplateSet,
}

/// The built-in twelve-domain template set. Free with `rp_templates_free`.
#[no_mangle]
pub extern "C" fn rp_templates_builtin() -> *mut RpTemplates {
    Box::into_raw(Box::new(RpTemplates { set: TemplateSet::builtin() }))
}

/// Loads a template set from a JSON config file. Returns null on failure
/// (see `rp_last_error_message`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rp_templates_load(path: *const c_char) -> *mut RpTemplates {
    let Ok(path) = require_str(path, "path") else { return ptr::null_mut() };
    match TemplateSet::load(Path::new(path)) {
        Ok(set) => Box::into_raw(Box::new(RpTemplates { set })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `templates` must be null or a live handle from `rp_templates_*`.
#[no_mangle]
pub unsafe extern "C" fn rp_templates_free(templates: *mut RpTemplates) {
    if !templates.is_null() {
        drop(Box::from_raw(templates));
    }
}

/// Field-set selector for `rp_render_history`.
#[repr(C)]
#[derive(Clone, Copy)]
pub enum RpFieldSet {
    Pretrain = 0,
    Rating = 1,
    Seqrec = 2,
}

/// Renders a history (canonical JSON form) with a domain template. On
/// success writes a caller-owned string to `out_text`.
///
/// # Safety
/// All pointers must be valid; `out_text` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rp_render_history(
    templates: *const RpTemplates,
    domain: *const c_char,
    history_json: *const c_char,
    field_set: RpFieldSet,
    out_text: *mut *mut c_char,
) -> RpStatus {
    if templates.is_null() || out_text.is_null() {
        return fail(RpStatus::NullArgument, "templates/out_text is null");
    }
    let domain = match require_str(domain, "domain") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let history_json = match require_str(history_json, "history_json") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let history: UserHistory = match serde_json::from_str(history_json) {
        Ok(h) => h,
        Err(e) => return fail(RpStatus::ParseFailure, format!("history json: {e}")),
    };
    let set = match field_set {
        RpFieldSet::Pretrain => FieldSet::Pretrain,
        RpFieldSet::Rating => FieldSet::Rating,
        RpFieldSet::Seqrec => FieldSet::Seqrec,
    };
    let template = match (*templates).set.get(domain) {
        Ok(t) => t,
        Err(e) => return fail(RpStatus::NotFound, e.to_string()),
    };
    match template.render_history(&history, set) {
        Ok(text) => give_string(out_text, text),
        Err(e) => fail(RpStatus::InvalidArgument, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Embedding and matching
// ---------------------------------------------------------------------------

/// Opaque handle around an immutable item index.
pub struct RpIndex {
    index: ItemIndex,
    embedder: NgramHashEmbedder,
}

/// Builds an index over an item catalog (`items.jsonl`), rendering each
/// item's match-text with the given domain template. Returns null on
/// failure.
///
/// # Safety
/// All pointer arguments must be valid NUL-terminated strings / handles.
#[no_mangle]
pub unsafe extern "C" fn rp_index_build(
    catalog_path: *const c_char,
    templates: *const RpTemplates,
    domain: *const c_char,
) -> *mut RpIndex {
    if templates.is_null() {
        set_error("templates is null");
        return ptr::null_mut();
    }
    let Ok(path) = require_str(catalog_path, "catalog_path") else { return ptr::null_mut() };
    let Ok(domain) = require_str(domain, "domain") else { return ptr::null_mut() };
    let template = match (*templates).set.get(domain) {
        Ok(t) => t,
        Err(e) => {
            set_error(e.to_string());
            return ptr::null_mut();
        }
    };
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) => {
            set_error(format!("{path}: {e}"));
            return ptr::null_mut();
        }
    };
    let items: Vec<Item> = match read_jsonl(std::io::BufReader::new(file)) {
        Ok(items) => items,
        Err(e) => {
            set_error(format!("{path}: {e}"));
            return ptr::null_mut();
        }
    };
    let embedder = NgramHashEmbedder::default();
    let entries: Vec<(String, String)> = items
        .iter()
        .map(|item| (item.item_id.clone(), template.render_response(item)))
        .collect();
    match build_index(entries.iter().map(|(id, text)| (id.as_str(), text.as_str())), &embedder) {
        Ok(index) => Box::into_raw(Box::new(RpIndex { index, embedder })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rp_index_load(path: *const c_char) -> *mut RpIndex {
    let Ok(path) = require_str(path, "path") else { return ptr::null_mut() };
    match ItemIndex::load(Path::new(path)) {
        Ok(index) => {
            let embedder = NgramHashEmbedder::default();
            if embedder.embedder_id() != index.embedder_id() {
                set_error(format!(
                    "index was built with embedder `{}`",
                    index.embedder_id()
                ));
                return ptr::null_mut();
            }
            Box::into_raw(Box::new(RpIndex { index, embedder }))
        }
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `index` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn rp_index_save(index: *const RpIndex, path: *const c_char) -> RpStatus {
    if index.is_null() {
        return fail(RpStatus::NullArgument, "index is null");
    }
    let path = match require_str(path, "path") {
        Ok(p) => p,
        Err(status) => return status,
    };
    match (*index).index.save(Path::new(path)) {
        Ok(()) => RpStatus::Ok,
        Err(e) => fail(RpStatus::Io, e.to_string()),
    }
}

/// Number of items in the index; 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_index_len(index: *const RpIndex) -> usize {
    if index.is_null() {
        0
    } else {
        (*index).index.len()
    }
}

/// # Safety
/// `index` must be null or a live handle from `rp_index_*`.
#[no_mangle]
pub unsafe extern "C" fn rp_index_free(index: *mut RpIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Exact top-m match. Writes a JSON array
/// `[{"item_id": "...", "score": 0.97}, ...]` to `out_json`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rp_index_match(
    index: *const RpIndex,
    query: *const c_char,
    m: usize,
    out_json: *mut *mut c_char,
) -> RpStatus {
    if index.is_null() || out_json.is_null() {
        return fail(RpStatus::NullArgument, "index/out_json is null");
    }
    let query = match require_str(query, "query") {
        Ok(q) => q,
        Err(status) => return status,
    };
    if m == 0 {
        return fail(RpStatus::InvalidArgument, "m must be at least 1");
    }
    let handle = &*index;
    match match_top(&handle.index, &handle.embedder, query, m) {
        Ok(hits) => {
            let rows: Vec<serde_json::Value> = hits
                .into_iter()
                .map(|(item_id, score)| serde_json::json!({"item_id": item_id, "score": score}))
                .collect();
            give_string(out_json, serde_json::Value::Array(rows).to_string())
        }
        Err(e) => fail(RpStatus::InvalidArgument, e.to_string()),
    }
}

/// Embeds text into a caller-provided buffer of `len` floats; `len` must
/// equal the embedder dimension (1024).
///
/// # Safety
/// `out` must point to at least `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn rp_embed(
    text: *const c_char,
    out: *mut c_float,
    len: usize,
) -> RpStatus {
    if out.is_null() {
        return fail(RpStatus::NullArgument, "out is null");
    }
    let text = match require_str(text, "text") {
        Ok(t) => t,
        Err(status) => return status,
    };
    let embedder = NgramHashEmbedder::default();
    if len != embedder.dimension() {
        return fail(
            RpStatus::InvalidArgument,
            format!("len {len} != embedder dimension {}", embedder.dimension()),
        );
    }
    match embedder.embed(text) {
        Ok(vector) => {
            ptr::copy_nonoverlapping(vector.as_ptr(), out, len);
            RpStatus::Ok
        }
        Err(e) => fail(RpStatus::InvalidArgument, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

unsafe fn pair_slices(
    predictions: *const c_double,
    truths: *const c_double,
    len: usize,
) -> Result<Vec<(f64, f64)>, RpStatus> {
    if predictions.is_null() || truths.is_null() {
        return Err(fail(RpStatus::NullArgument, "predictions/truths is null"));
    }
    let p = std::slice::from_raw_parts(predictions, len);
    let t = std::slice::from_raw_parts(truths, len);
    Ok(p.iter().copied().zip(t.iter().copied()).collect())
}

/// Root mean square error over parallel arrays.
///
/// # Safety
/// `predictions` and `truths` must point to `len` readable doubles and
/// `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn rp_rmse(
    predictions: *const c_double,
    truths: *const c_double,
    len: usize,
    out: *mut c_double,
) -> RpStatus {
    let pairs = match pair_slices(predictions, truths, len) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match rmse(&pairs) {
        Ok(value) => {
            *out = value;
            RpStatus::Ok
        }
        Err(e) => fail(RpStatus::InvalidArgument, e.to_string()),
    }
}

/// Mean absolute error over parallel arrays.
///
/// # Safety
/// Same contract as [`rp_rmse`].
#[no_mangle]
pub unsafe extern "C" fn rp_mae(
    predictions: *const c_double,
    truths: *const c_double,
    len: usize,
    out: *mut c_double,
) -> RpStatus {
    let pairs = match pair_slices(predictions, truths, len) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match mae(&pairs) {
        Ok(value) => {
            *out = value;
            RpStatus::Ok
        }
        Err(e) => fail(RpStatus::InvalidArgument, e.to_string()),
    }
}

/// HR@k for a single query given the truth's 1-based rank (0 = not ranked).
#[no_mangle]
pub extern "C" fn rp_hit_rate_at_k(truth_rank: usize, k: usize) -> c_double {
    if k == 0 {
        return 0.0;
    }
    let ranking = synthetic_ranking(truth_rank);
    hit_rate_at_k(&ranking, "truth", k)
}

/// Single-relevant-item NDCG@k given the truth's 1-based rank (0 = not
/// ranked).
#[no_mangle]
pub extern "C" fn rp_ndcg_at_k(truth_rank: usize, k: usize) -> c_double {
    if k == 0 {
        return 0.0;
    }
    let ranking = synthetic_ranking(truth_rank);
    ndcg_at_k(&ranking, "truth", k)
}

/// A ranking with "truth" at the given 1-based rank, long enough that only
/// the rank matters.
fn synthetic_ranking(truth_rank: usize) -> Vec<String> {
    if truth_rank == 0 {
        return vec!["filler".to_string()];
    }
    (1..=truth_rank)
        .map(|r| if r == truth_rank { "truth".to_string() } else { format!("filler{r}") })
        .collect()
}

/// Parses a predicted rating out of a generation. Returns `ParseFailure`
/// when no value can be extracted.
///
/// # Safety
/// `text` must be a valid NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rp_parse_rating(
    text: *const c_char,
    scale: c_double,
    out: *mut c_double,
) -> RpStatus {
    if out.is_null() {
        return fail(RpStatus::NullArgument, "out is null");
    }
    let text = match require_str(text, "text") {
        Ok(t) => t,
        Err(status) => return status,
    };
    match parse_rating(text, scale) {
        Some(value) => {
            *out = value;
            RpStatus::Ok
        }
        None => fail(RpStatus::ParseFailure, format!("no rating found in {text:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(text: &str) -> CString {
        CString::new(text).unwrap()
    }

    #[test]
    fn version_is_non_null() {
        let v = rp_version();
        assert!(!v.is_null());
        let text = unsafe { CStr::from_ptr(v) }.to_str().unwrap();
        assert_eq!(text, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn render_history_through_ffi() {
        let templates = rp_templates_builtin();
        let history = serde_json::json!({
            "user_id": "u1",
            "dataset_id": "netflix",
            "entries": [{
                "item": {"item_id": "m1", "title": "Heat"},
                "interaction": {
                    "user_id": "u1", "item_id": "m1", "rating": 5.0,
                    "dataset_id": "netflix"
                }
            }]
        })
        .to_string();
        let domain = c("netflix");
        let json = c(&history);
        let mut out: *mut c_char = ptr::null_mut();
        let status = unsafe {
            rp_render_history(templates, domain.as_ptr(), json.as_ptr(), RpFieldSet::Pretrain, &mut out)
        };
        assert_eq!(status, RpStatus::Ok);
        let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
        unsafe { rp_string_free(out) };
        unsafe { rp_templates_free(templates) };
        assert_eq!(
            text,
            "Given the interaction history of a user with movies/shows as follows:\nTitle: Heat; Rating: 5.0/5.0"
        );
    }

    #[test]
    fn unknown_domain_reports_error() {
        let templates = rp_templates_builtin();
        let domain = c("nope");
        let json = c(r#"{"user_id":"u","dataset_id":"d","entries":[]}"#);
        let mut out: *mut c_char = ptr::null_mut();
        let status = unsafe {
            rp_render_history(templates, domain.as_ptr(), json.as_ptr(), RpFieldSet::Pretrain, &mut out)
        };
        assert_eq!(status, RpStatus::NotFound);
        let message = unsafe { CStr::from_ptr(rp_last_error_message()) }.to_str().unwrap();
        assert!(message.contains("nope"));
        unsafe { rp_templates_free(templates) };
    }

    #[test]
    fn index_build_match_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = dir.path().join("items.jsonl");
        let lines: Vec<String> = (0..20)
            .map(|i| {
                serde_json::json!({
                    "item_id": format!("m{i}"),
                    "title": format!("Distinct Film Number {i}")
                })
                .to_string()
            })
            .collect();
        std::fs::write(&catalog, lines.join("\n")).unwrap();

        let templates = rp_templates_builtin();
        let path = c(catalog.to_str().unwrap());
        let domain = c("netflix");
        let index = unsafe { rp_index_build(path.as_ptr(), templates, domain.as_ptr()) };
        assert!(!index.is_null());
        assert_eq!(unsafe { rp_index_len(index) }, 20);

        let query = c("Title: Distinct Film Number 7");
        let mut out: *mut c_char = ptr::null_mut();
        let status = unsafe { rp_index_match(index, query.as_ptr(), 3, &mut out) };
        assert_eq!(status, RpStatus::Ok);
        let json = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
        unsafe { rp_string_free(out) };
        let rows: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0]["item_id"], "m7");

        let saved = dir.path().join("index.rpix");
        let saved_c = c(saved.to_str().unwrap());
        assert_eq!(unsafe { rp_index_save(index, saved_c.as_ptr()) }, RpStatus::Ok);
        let reloaded = unsafe { rp_index_load(saved_c.as_ptr()) };
        assert!(!reloaded.is_null());
        assert_eq!(unsafe { rp_index_len(reloaded) }, 20);

        unsafe { rp_index_free(index) };
        unsafe { rp_index_free(reloaded) };
        unsafe { rp_templates_free(templates) };
    }

    #[test]
    fn metrics_through_ffi() {
        let predictions = [4.0, 2.0];
        let truths = [5.0, 2.0];
        let mut out = 0.0;
        let status = unsafe { rp_rmse(predictions.as_ptr(), truths.as_ptr(), 2, &mut out) };
        assert_eq!(status, RpStatus::Ok);
        assert!((out - 0.5f64.sqrt()).abs() < 1e-12);
        let status = unsafe { rp_mae(predictions.as_ptr(), truths.as_ptr(), 2, &mut out) };
        assert_eq!(status, RpStatus::Ok);
        assert!((out - 0.5).abs() < 1e-12);

        assert_eq!(rp_hit_rate_at_k(3, 5), 1.0);
        assert_eq!(rp_hit_rate_at_k(11, 10), 0.0);
        assert_eq!(rp_hit_rate_at_k(0, 10), 0.0);
        assert!((rp_ndcg_at_k(3, 5) - 0.5).abs() < 1e-12);
        assert_eq!(rp_ndcg_at_k(1, 5), 1.0);
    }

    #[test]
    fn parse_rating_through_ffi() {
        let text = c("I give it 4.0/5.0 overall");
        let mut out = 0.0;
        let status = unsafe { rp_parse_rating(text.as_ptr(), 5.0, &mut out) };
        assert_eq!(status, RpStatus::Ok);
        assert_eq!(out, 4.0);

        let bad = c("no idea");
        let status = unsafe { rp_parse_rating(bad.as_ptr(), 5.0, &mut out) };
        assert_eq!(status, RpStatus::ParseFailure);
    }

    #[test]
    fn embed_fills_buffer() {
        let text = c("Title: Something");
        let mut buf = vec![0f32; 1024];
        let status = unsafe { rp_embed(text.as_ptr(), buf.as_mut_ptr(), buf.len()) };
        assert_eq!(status, RpStatus::Ok);
        let norm: f64 = buf.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let status = unsafe { rp_embed(text.as_ptr(), buf.as_mut_ptr(), 10) };
        assert_eq!(status, RpStatus::InvalidArgument);
    }
}
