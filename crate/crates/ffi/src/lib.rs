//! C ABI over asrkit. Every fallible call returns an [`AskStatus`]; on failure
//! the message is available from [`ask_last_error`] on the same thread.
//! Handles are opaque and owned by the caller until passed to the matching
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use asrkit::am::{AcousticModel, RefModel};
use asrkit::corpus::FeatureMatrix;
use asrkit::ctc::{ctc_loss_and_logit_grad, greedy_decode, PosteriorGrid};
use asrkit::ngram::{read_arpa, BackoffLm};
use asrkit::score::align;
use asrkit::wfst::{decode_frames, DecodeConfig, Wfst};
use asrkit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AskStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    /// Target needs more frames than provided.
    Infeasible = 5,
    SearchFailed = 6,
    /// Output buffer too small; the required length was still written.
    BufferTooSmall = 7,
    Panic = 8,
}

pub struct AskLm {
    lm: BackoffLm,
}

pub struct AskModel {
    model: RefModel,
}

pub struct AskGraph {
    graph: Wfst,
    words: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: AskStatus, msg: impl Into<String>) -> AskStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> AskStatus {
    match e {
        Error::Io { .. } => AskStatus::Io,
        Error::Format { .. } | Error::Json(_) => AskStatus::Format,
        Error::Infeasible { .. } => AskStatus::Infeasible,
        Error::SearchFailed(_) => AskStatus::SearchFailed,
        _ => AskStatus::InvalidArgument,
    }
}

fn from_err(e: Error) -> AskStatus {
    fail(status_of(&e), e.to_string())
}

/// Runs `f`, converting panics into `AskStatus::Panic`.
fn guard(f: impl FnOnce() -> AskStatus) -> AskStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(AskStatus::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, AskStatus> {
    if p.is_null() {
        return Err(fail(AskStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AskStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], AskStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(AskStatus::NullArgument, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

fn check_len(frames: usize, width: usize, name: &str) -> Result<usize, AskStatus> {
    frames
        .checked_mul(width)
        .ok_or_else(|| fail(AskStatus::InvalidArgument, format!("{name} size overflows")))
}

/// Copies `src` into `out` when it fits; always reports the length in `out_len`.
unsafe fn write_out<T: Copy>(src: &[T], out: *mut T, capacity: usize, out_len: *mut usize) -> AskStatus {
    if out_len.is_null() {
        return fail(AskStatus::NullArgument, "out_len is null");
    }
    *out_len = src.len();
    if src.len() > capacity {
        return fail(
            AskStatus::BufferTooSmall,
            format!("need {} elements, capacity {capacity}", src.len()),
        );
    }
    if !src.is_empty() {
        if out.is_null() {
            return fail(AskStatus::NullArgument, "output buffer is null");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    AskStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ask_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn ask_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ask_lm_load(path: *const c_char, out: *mut *mut AskLm) -> AskStatus {
    guard(|| {
        if out.is_null() {
            return fail(AskStatus::NullArgument, "out is null");
        }
        let path = tri!(str_arg(path, "path"));
        let lm = tri!(read_arpa(PathBuf::from(path)).map_err(from_err));
        *out = Box::into_raw(Box::new(AskLm { lm }));
        AskStatus::Ok
    })
}

/// # Safety
/// `lm` must come from `ask_lm_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ask_lm_free(lm: *mut AskLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// # Safety
/// `lm` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ask_lm_order(lm: *const AskLm) -> usize {
    lm.as_ref().map_or(0, |h| h.lm.order())
}

/// Natural-log probability of a whitespace-separated sentence including the
/// end-of-sentence event. Unknown words without `<unk>` give negative infinity.
///
/// # Safety
/// `lm` must be a live handle, `sentence` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ask_lm_sentence_log_prob(lm: *const AskLm, sentence: *const c_char, out: *mut f64) -> AskStatus {
    guard(|| {
        let Some(h) = lm.as_ref() else {
            return fail(AskStatus::NullArgument, "lm is null");
        };
        if out.is_null() {
            return fail(AskStatus::NullArgument, "out is null");
        }
        let s = tri!(str_arg(sentence, "sentence"));
        let words: Vec<&str> = s.split_whitespace().collect();
        *out = h.lm.sentence_log_prob(&words);
        AskStatus::Ok
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ask_model_load(path: *const c_char, out: *mut *mut AskModel) -> AskStatus {
    guard(|| {
        if out.is_null() {
            return fail(AskStatus::NullArgument, "out is null");
        }
        let path = tri!(str_arg(path, "path"));
        let model = tri!(RefModel::load(PathBuf::from(path)).map_err(from_err));
        *out = Box::into_raw(Box::new(AskModel { model }));
        AskStatus::Ok
    })
}

/// # Safety
/// `model` must come from `ask_model_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ask_model_free(model: *mut AskModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ask_model_input_dim(model: *const AskModel) -> usize {
    model.as_ref().map_or(0, |h| h.model.input_dim())
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ask_model_num_outputs(model: *const AskModel) -> usize {
    model.as_ref().map_or(0, |h| h.model.num_outputs())
}

/// Row-major natural-log posteriors (`frames` x outputs) for row-major
/// single-precision features (`frames` x input dim).
///
/// # Safety
/// `features` must hold `frames * dims` values and `out` at least `capacity`.
#[no_mangle]
pub unsafe extern "C" fn ask_model_posteriors(
    model: *const AskModel,
    features: *const f32,
    frames: usize,
    dims: usize,
    out: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> AskStatus {
    guard(|| {
        let Some(h) = model.as_ref() else {
            return fail(AskStatus::NullArgument, "model is null");
        };
        let n = tri!(check_len(frames, dims, "features"));
        let values = tri!(slice_arg(features, n, "features"));
        let feats = tri!(FeatureMatrix::new(frames, dims, values.to_vec()).map_err(from_err));
        let grid = tri!(h.model.posteriors(&feats).map_err(from_err));
        write_out(grid.values(), out, capacity, out_len)
    })
}

unsafe fn grid_arg(logits: *const f64, frames: usize, vocab: usize) -> Result<PosteriorGrid, AskStatus> {
    let n = check_len(frames, vocab, "logits")?;
    let values = slice_arg(logits, n, "logits")?;
    PosteriorGrid::from_logits(frames, vocab, values).map_err(from_err)
}

/// CTC negative log-likelihood of `target` (labels in 1..vocab, blank is 0)
/// given row-major logits. When `grad` is non-null it receives the
/// `frames * vocab` gradient with respect to the logits.
///
/// # Safety
/// `logits` must hold `frames * vocab` values, `target` `target_len` labels,
/// `grad` null or `frames * vocab` slots.
#[no_mangle]
pub unsafe extern "C" fn ask_ctc_loss(
    logits: *const f64,
    frames: usize,
    vocab: usize,
    target: *const u32,
    target_len: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> AskStatus {
    guard(|| {
        if loss.is_null() {
            return fail(AskStatus::NullArgument, "loss is null");
        }
        let grid = tri!(grid_arg(logits, frames, vocab));
        let target: Vec<usize> = tri!(slice_arg(target, target_len, "target")).iter().map(|&t| t as usize).collect();
        let (l, g) = tri!(ctc_loss_and_logit_grad(&grid, &target).map_err(from_err));
        *loss = l;
        if !grad.is_null() {
            ptr::copy_nonoverlapping(g.as_ptr(), grad, g.len());
        }
        AskStatus::Ok
    })
}

/// Best-path decode: per-frame argmax, repeats merged, blanks removed.
///
/// # Safety
/// `logits` must hold `frames * vocab` values and `out` at least `capacity` labels.
#[no_mangle]
pub unsafe extern "C" fn ask_ctc_greedy(
    logits: *const f64,
    frames: usize,
    vocab: usize,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> AskStatus {
    guard(|| {
        let grid = tri!(grid_arg(logits, frames, vocab));
        let labels: Vec<u32> = greedy_decode(&grid).into_iter().map(|l| l as u32).collect();
        write_out(&labels, out, capacity, out_len)
    })
}

/// Loads `<dir>/<stem>.fst` with its symbol tables.
///
/// # Safety
/// `dir` and `stem` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ask_graph_load(dir: *const c_char, stem: *const c_char, out: *mut *mut AskGraph) -> AskStatus {
    guard(|| {
        if out.is_null() {
            return fail(AskStatus::NullArgument, "out is null");
        }
        let dir = tri!(str_arg(dir, "dir"));
        let stem = tri!(str_arg(stem, "stem"));
        let graph = tri!(Wfst::load(PathBuf::from(dir), stem).map_err(from_err));
        let words = graph
            .osyms()
            .symbols()
            .iter()
            .map(|s| CString::new(s.as_str()).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(AskGraph { graph, words }));
        AskStatus::Ok
    })
}

/// # Safety
/// `graph` must come from `ask_graph_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ask_graph_free(graph: *mut AskGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Output symbol for `id`, or null when out of range. Owned by the handle.
///
/// # Safety
/// `graph` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ask_graph_word(graph: *const AskGraph, id: u32) -> *const c_char {
    graph
        .as_ref()
        .and_then(|h| h.words.get(id as usize))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Viterbi decode of row-major logits through the graph. Writes output word
/// ids and the total path cost. `beam <= 0` searches exhaustively.
///
/// # Safety
/// `logits` must hold `frames * vocab` values, `out` at least `capacity` ids,
/// `cost` null or valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ask_graph_decode(
    graph: *const AskGraph,
    logits: *const f64,
    frames: usize,
    vocab: usize,
    beam: f64,
    acoustic_scale: f64,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
    cost: *mut f64,
) -> AskStatus {
    guard(|| {
        let Some(h) = graph.as_ref() else {
            return fail(AskStatus::NullArgument, "graph is null");
        };
        let grid = tri!(grid_arg(logits, frames, vocab));
        let config = if beam > 0.0 {
            DecodeConfig {
                beam,
                acoustic_scale,
                ..DecodeConfig::default()
            }
        } else {
            DecodeConfig::exhaustive(acoustic_scale)
        };
        let result = tri!(decode_frames(&grid, &h.graph, config).map_err(from_err));
        if !cost.is_null() {
            *cost = result.total_cost;
        }
        write_out(&result.words, out, capacity, out_len)
    })
}

/// Word-level edit counts between whitespace-separated strings.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AskWer {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    /// Errors over reference words; 0 for an empty pair, 1 per insertion for an empty reference.
    pub wer: f64,
}

/// # Safety
/// `reference` and `hypothesis` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ask_wer(reference: *const c_char, hypothesis: *const c_char, out: *mut AskWer) -> AskStatus {
    guard(|| {
        if out.is_null() {
            return fail(AskStatus::NullArgument, "out is null");
        }
        let r: Vec<&str> = tri!(str_arg(reference, "reference")).split_whitespace().collect();
        let h: Vec<&str> = tri!(str_arg(hypothesis, "hypothesis")).split_whitespace().collect();
        let rep = align(&r, &h);
        *out = AskWer {
            substitutions: rep.substitutions,
            deletions: rep.deletions,
            insertions: rep.insertions,
            reference_words: rep.reference_len(),
            wer: rep.wer,
        };
        AskStatus::Ok
    })
}
