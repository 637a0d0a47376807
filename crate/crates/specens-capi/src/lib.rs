//! C ABI for the decoding engine: opaque handles, integer status codes,
//! and a JSON-configured decode entry point.
//!
//! Every function is panic-safe (panics become `SPECENS_ERR_RUNTIME`) and
//! records a thread-local error message retrievable with
//! [`specens_last_error`]. Pointers returned by this library must be freed
//! with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use specens::core::RandomSource;
use specens::decoding::{decode_with_rng, DecodeConfig, DecodeTrace};
use specens::models::{load_table_model, random_table_model, ModelHandle};
use specens::Error;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecensStatus {
    /// Success.
    SpecensOk = 0,
    /// Invalid configuration or arguments.
    SpecensErrConfig = 1,
    /// Model, decoding, or I/O failure.
    SpecensErrRuntime = 2,
    /// A required pointer argument was null.
    SpecensErrNullArg = 3,
    /// A string argument was not valid UTF-8.
    SpecensErrUtf8 = 4,
}

/// Opaque handle to a loaded model.
pub struct SpecensModel {
    handle: ModelHandle,
}

/// Opaque handle to a completed decode trace.
pub struct SpecensTrace {
    trace: DecodeTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("no interior nul");
    });
}

fn fail(err: &Error) -> SpecensStatus {
    set_error(&err.to_string());
    match err {
        Error::Config(_) | Error::Weight(_) => SpecensStatus::SpecensErrConfig,
        _ => SpecensStatus::SpecensErrRuntime,
    }
}

/// Runs `body` with panics converted to `SPECENS_ERR_RUNTIME`.
fn guarded(body: impl FnOnce() -> SpecensStatus) -> SpecensStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SpecensStatus::SpecensErrRuntime
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, SpecensStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(SpecensStatus::SpecensErrNullArg);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SpecensStatus::SpecensErrUtf8
    })
}

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn specens_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a table-model file. On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specens_model_load(
    path: *const c_char,
    out: *mut *mut SpecensModel,
) -> SpecensStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return SpecensStatus::SpecensErrNullArg;
        }
        let path = match read_str(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_table_model(path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(SpecensModel {
                    handle: Arc::new(model),
                }));
                SpecensStatus::SpecensOk
            }
            Err(err) => fail(&err),
        }
    })
}

/// Builds a seeded random table model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specens_model_random_table(
    seed: u64,
    vocab_size: usize,
    context_length: usize,
    concentration: f64,
    cost: f64,
    out: *mut *mut SpecensModel,
) -> SpecensStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return SpecensStatus::SpecensErrNullArg;
        }
        match random_table_model(
            seed,
            vocab_size,
            context_length,
            concentration,
            cost,
            format!("table-{seed}"),
        ) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(SpecensModel {
                    handle: Arc::new(model),
                }));
                SpecensStatus::SpecensOk
            }
            Err(err) => fail(&err),
        }
    })
}

/// Frees a model handle; accepts null.
///
/// # Safety
/// `model` must be null or a pointer returned by a `specens_model_*`
/// constructor, not freed before.
#[no_mangle]
pub unsafe extern "C" fn specens_model_free(model: *mut SpecensModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a model; 0 for null.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn specens_model_vocab_size(model: *const SpecensModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).handle.vocab().size()
}

/// Simulated cost per invocation; NaN for null.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn specens_model_cost(model: *const SpecensModel) -> f64 {
    if model.is_null() {
        return f64::NAN;
    }
    (*model).handle.cost()
}

/// Runs one decode session. `config_json` is the JSON encoding of the
/// engine's decode configuration, for example:
///
/// ```json
/// {"strategy":"spec-ensemble",
///  "ensemble":{"kind":"weighted","lambda":0.5,"temperature":1.0},
///  "gammas":[2,1],"max_tokens":32,"seed":7}
/// ```
///
/// # Safety
/// `models` must point to `n_models` live model handles, `prefix` to
/// `prefix_len` readable ids (null allowed when `prefix_len` is 0), and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specens_decode(
    models: *const *const SpecensModel,
    n_models: usize,
    config_json: *const c_char,
    prefix: *const u32,
    prefix_len: usize,
    out: *mut *mut SpecensTrace,
) -> SpecensStatus {
    guarded(|| {
        if out.is_null() || models.is_null() || (prefix.is_null() && prefix_len > 0) {
            set_error("null pointer argument");
            return SpecensStatus::SpecensErrNullArg;
        }
        let config_text = match read_str(config_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let config: DecodeConfig = match serde_json::from_str(config_text) {
            Ok(c) => c,
            Err(err) => {
                set_error(&format!("bad decode config: {err}"));
                return SpecensStatus::SpecensErrConfig;
            }
        };
        let mut handles = Vec::with_capacity(n_models);
        for i in 0..n_models {
            let model = *models.add(i);
            if model.is_null() {
                set_error(&format!("model {i} is null"));
                return SpecensStatus::SpecensErrNullArg;
            }
            handles.push((*model).handle.clone());
        }
        let prefix = if prefix_len == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(prefix, prefix_len)
        };
        let mut rng = RandomSource::new(config.seed);
        match decode_with_rng(&handles, &config, prefix, &mut rng) {
            Ok(trace) => {
                *out = Box::into_raw(Box::new(SpecensTrace { trace }));
                SpecensStatus::SpecensOk
            }
            Err(err) => fail(&err),
        }
    })
}

/// Number of emitted tokens; 0 for null.
///
/// # Safety
/// `trace` must be null or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_token_count(trace: *const SpecensTrace) -> usize {
    if trace.is_null() {
        return 0;
    }
    (*trace).trace.tokens.len()
}

/// Copies the emitted tokens into `out` (capacity `cap`).
///
/// # Safety
/// `trace` must be a live trace handle and `out` writable for `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_tokens(
    trace: *const SpecensTrace,
    out: *mut u32,
    cap: usize,
) -> SpecensStatus {
    guarded(|| {
        if trace.is_null() || out.is_null() {
            set_error("null pointer argument");
            return SpecensStatus::SpecensErrNullArg;
        }
        let tokens = &(*trace).trace.tokens;
        if cap < tokens.len() {
            set_error(&format!(
                "buffer of {cap} ids cannot hold {} tokens",
                tokens.len()
            ));
            return SpecensStatus::SpecensErrConfig;
        }
        std::ptr::copy_nonoverlapping(tokens.as_ptr(), out, tokens.len());
        SpecensStatus::SpecensOk
    })
}

/// Total simulated time of the session; NaN for null.
///
/// # Safety
/// `trace` must be null or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_simulated_time(trace: *const SpecensTrace) -> f64 {
    if trace.is_null() {
        return f64::NAN;
    }
    (*trace).trace.simulated_time
}

/// Accepted verification events.
///
/// # Safety
/// `trace` must be null or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_accepted(trace: *const SpecensTrace) -> u64 {
    if trace.is_null() {
        return 0;
    }
    (*trace).trace.accepted
}

/// Rejected verification events.
///
/// # Safety
/// `trace` must be null or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_rejected(trace: *const SpecensTrace) -> u64 {
    if trace.is_null() {
        return 0;
    }
    (*trace).trace.rejected
}

/// Empirical acceptance rate; NaN when nothing was verified or for null.
///
/// # Safety
/// `trace` must be null or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_empirical_alpha(trace: *const SpecensTrace) -> f64 {
    if trace.is_null() {
        return f64::NAN;
    }
    (*trace).trace.empirical_alpha.unwrap_or(f64::NAN)
}

/// Serializes the full trace as JSON into a newly allocated string; free
/// it with [`specens_string_free`].
///
/// # Safety
/// `trace` must be a live trace handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_to_json(
    trace: *const SpecensTrace,
    out: *mut *mut c_char,
) -> SpecensStatus {
    guarded(|| {
        if trace.is_null() || out.is_null() {
            set_error("null pointer argument");
            return SpecensStatus::SpecensErrNullArg;
        }
        match serde_json::to_string(&(*trace).trace) {
            Ok(text) => {
                let c = CString::new(text).expect("JSON has no interior nul");
                *out = c.into_raw();
                SpecensStatus::SpecensOk
            }
            Err(err) => {
                set_error(&err.to_string());
                SpecensStatus::SpecensErrRuntime
            }
        }
    })
}

/// Frees a string returned by this library; accepts null.
///
/// # Safety
/// `s` must be null or a string returned by this library, not freed
/// before.
#[no_mangle]
pub unsafe extern "C" fn specens_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Frees a trace handle; accepts null.
///
/// # Safety
/// `trace` must be null or a pointer returned by [`specens_decode`], not
/// freed before.
#[no_mangle]
pub unsafe extern "C" fn specens_trace_free(trace: *mut SpecensTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}
