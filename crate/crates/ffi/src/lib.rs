//! C ABI over the sidgr workbench.
//!
//! Objects cross the boundary as opaque handles created by `*_open` and
//! released by the matching `*_free`. Every fallible call returns a
//! [`SidgrStatus`]; on failure the message is kept per thread and read with
//! [`sidgr_last_error`]. Panics are caught and reported as
//! `SIDGR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sidgr::cli::{open_tiger_run, CliError};
use sidgr::decode::next_item_candidates;
use sidgr::models::{SidCatalog, Tiger};
use sidgr::scaling::{fit, read_points, EqForm, FitOptions, ScalingError};
use sidgr::tokenizer::{assign, read_codebooks, SidCodebooks, TokenizerError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SidgrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Residual-quantization codebooks.
pub struct SidgrCodebooks {
    books: SidCodebooks,
}

/// A trained encoder-decoder with its SID catalogue.
pub struct SidgrRecommender {
    model: Tiger<f32>,
    catalog: SidCatalog,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SidgrStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(SidgrStatus::NullArgument, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(SidgrStatus::InvalidArgument, msg.into())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e.exit_code() {
            2 => SidgrStatus::Config,
            4 => SidgrStatus::Numerical,
            _ => SidgrStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

impl From<TokenizerError> for Failure {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::DimensionMismatch { .. } => Failure::invalid(e.to_string()),
            _ => Failure(SidgrStatus::Data, e.to_string()),
        }
    }
}

impl From<ScalingError> for Failure {
    fn from(e: ScalingError) -> Self {
        CliError::from(e).into()
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SidgrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SidgrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            SidgrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(what))
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `cap`) into `buf` and returns the length it needs including
/// the terminator. `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sidgr_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sidgr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a codebook file written by `sidgr tokenize`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sidgr_codebooks_open(path: *const c_char, out: *mut *mut SidgrCodebooks) -> SidgrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = path_arg(path, "path")?;
        let f = File::open(&path).map_err(|e| Failure(SidgrStatus::Data, format!("{}: {e}", path.display())))?;
        let books = read_codebooks(BufReader::new(f))?;
        *out = Box::into_raw(Box::new(SidgrCodebooks { books }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`sidgr_codebooks_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sidgr_codebooks_free(h: *mut SidgrCodebooks) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Embedding dimension and number of levels.
///
/// # Safety
/// `h` must be a live handle; `dim` and `levels` writable.
#[no_mangle]
pub unsafe extern "C" fn sidgr_codebooks_shape(
    h: *const SidgrCodebooks,
    dim: *mut usize,
    levels: *mut usize,
) -> SidgrStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| Failure::null("codebooks"))?;
        *out_arg(dim, "dim")? = h.books.dim();
        *out_arg(levels, "levels")? = h.books.num_levels();
        Ok(())
    })
}

/// Quantizes one embedding: writes one code per level into `codes` and, when
/// `reconstruction` is non-null, the sum of the chosen codewords.
///
/// # Safety
/// `h` must be a live handle, `embedding` must hold `dim` floats, `codes`
/// `codes_len` slots and `reconstruction` (if non-null) `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn sidgr_codebooks_assign(
    h: *const SidgrCodebooks,
    embedding: *const f32,
    dim: usize,
    codes: *mut usize,
    codes_len: usize,
    reconstruction: *mut f32,
) -> SidgrStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| Failure::null("codebooks"))?;
        if embedding.is_null() {
            return Err(Failure::null("embedding"));
        }
        if codes.is_null() {
            return Err(Failure::null("codes"));
        }
        if codes_len < h.books.num_levels() {
            return Err(Failure(
                SidgrStatus::BufferTooSmall,
                format!("codes holds {codes_len}, need {}", h.books.num_levels()),
            ));
        }
        let a = assign(std::slice::from_raw_parts(embedding, dim), &h.books)?;
        std::slice::from_raw_parts_mut(codes, a.codes.len()).copy_from_slice(&a.codes);
        if !reconstruction.is_null() {
            std::slice::from_raw_parts_mut(reconstruction, dim).copy_from_slice(&a.reconstruction);
        }
        Ok(())
    })
}

/// Loads a trained run directory (after `sidgr train-tiger`).
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sidgr_recommender_open(
    run_dir: *const c_char,
    out: *mut *mut SidgrRecommender,
) -> SidgrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let dir = path_arg(run_dir, "run_dir")?;
        let (model, catalog) = open_tiger_run(&dir)?;
        *out = Box::into_raw(Box::new(SidgrRecommender { model, catalog }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`sidgr_recommender_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sidgr_recommender_free(h: *mut SidgrRecommender) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Catalogue size, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sidgr_recommender_num_items(h: *const SidgrRecommender) -> usize {
    h.as_ref().map_or(0, |r| r.catalog.len())
}

/// Copies the id of catalogue item `index` into `buf`; `needed` receives the
/// length including the terminator.
///
/// # Safety
/// `h` must be a live handle, `buf` null or `cap` writable bytes, `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sidgr_recommender_item_id(
    h: *const SidgrRecommender,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> SidgrStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| Failure::null("recommender"))?;
        let needed = out_arg(needed, "needed")?;
        if index >= h.catalog.len() {
            return Err(Failure::invalid(format!("index {index} >= {}", h.catalog.len())));
        }
        let id = h.catalog.item_id(index).as_bytes();
        *needed = id.len() + 1;
        if buf.is_null() || cap < id.len() + 1 {
            return Err(Failure(SidgrStatus::BufferTooSmall, format!("need {} bytes", id.len() + 1)));
        }
        std::ptr::copy_nonoverlapping(id.as_ptr().cast(), buf, id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}

/// Beam-decodes the top `k` next items for a history of item ids (oldest
/// first). Writes catalogue indices and log-probabilities, best first, and
/// the number written to `n_out` (at most `k`).
///
/// # Safety
/// `history` must hold `history_len` NUL-terminated strings (or be null when
/// the length is 0); `items_out` and `scores_out` must hold `k` slots.
#[no_mangle]
pub unsafe extern "C" fn sidgr_recommender_recommend(
    h: *const SidgrRecommender,
    history: *const *const c_char,
    history_len: usize,
    k: usize,
    items_out: *mut usize,
    scores_out: *mut f64,
    n_out: *mut usize,
) -> SidgrStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| Failure::null("recommender"))?;
        let n_out = out_arg(n_out, "n_out")?;
        *n_out = 0;
        if k == 0 {
            return Err(Failure::invalid("k must be positive"));
        }
        if items_out.is_null() || scores_out.is_null() {
            return Err(Failure::null("output buffers"));
        }
        if history.is_null() && history_len > 0 {
            return Err(Failure::null("history"));
        }
        let mut idx = Vec::with_capacity(history_len);
        for i in 0..history_len {
            let id = str_arg(*history.add(i), "history entry")?;
            idx.push(
                h.catalog
                    .index_of(id)
                    .ok_or_else(|| Failure::invalid(format!("unknown item {id}")))?,
            );
        }
        let err = |e: &dyn std::fmt::Display| Failure(SidgrStatus::Data, e.to_string());
        let ctx = h.model.encode_context(&h.catalog, &idx).map_err(|e| err(&e))?;
        let cands = next_item_candidates(&ctx, &[], h.catalog.trie(), h.catalog.item_len(), k).map_err(|e| err(&e))?;
        let items = std::slice::from_raw_parts_mut(items_out, k);
        let scores = std::slice::from_raw_parts_mut(scores_out, k);
        for (j, (id, score)) in cands.iter().enumerate().take(k) {
            items[j] = h.catalog.index_of(id).expect("trie payloads are catalogue ids");
            scores[j] = *score;
        }
        *n_out = cands.len().min(k);
        Ok(())
    })
}

/// Fits scaling law `form` (e.g. "eq4") to a JSONL points file with default
/// options and the given multistart seed. `json_out` receives the fit as a
/// JSON string owned by the caller, released with [`sidgr_string_free`].
///
/// # Safety
/// `form` and `points_path` must be NUL-terminated strings; `json_out` writable.
#[no_mangle]
pub unsafe extern "C" fn sidgr_fit_scaling(
    form: *const c_char,
    points_path: *const c_char,
    seed: u64,
    json_out: *mut *mut c_char,
) -> SidgrStatus {
    guard(|| {
        let out = out_arg(json_out, "json_out")?;
        *out = std::ptr::null_mut();
        let form: EqForm = str_arg(form, "form")?.parse().map_err(Failure::invalid)?;
        let path = path_arg(points_path, "points_path")?;
        let f = File::open(&path).map_err(|e| Failure(SidgrStatus::Data, format!("{}: {e}", path.display())))?;
        let points = read_points(BufReader::new(f))?;
        let opts = FitOptions {
            seed,
            ..FitOptions::default()
        };
        let result = fit(form, &points, &opts)?;
        let json = serde_json::to_string(&result).map_err(|e| Failure(SidgrStatus::Data, e.to_string()))?;
        *out = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sidgr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
