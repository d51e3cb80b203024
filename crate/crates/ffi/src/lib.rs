// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over `invprobe`.
//!
//! Every fallible call returns an [`IpStatus`]; on failure the message is
//! available from [`ip_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings handed
//! out by the library are released with [`ip_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use invprobe::grok::{train_run, GrokConfig};
use invprobe::numkit::Matrix;
use invprobe::probe::{self, EvalOptions, HeadScore};
use invprobe::sae::{sae_scores, SaeConfig};
use invprobe::store::{load_bundle, read_actbin, write_bundle, ActivationBundle, HeadId};
use invprobe::synth::{generate_bundle, SynthConfig};
use invprobe::unsupervised::{unsupervised_scores, ProbeTrainConfig};
use invprobe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Infeasible = 6,
    Numerical = 7,
    Panic = 8,
}

/// Activation bundle held in memory.
pub struct IpBundle(ActivationBundle);

/// Per-head scores, sorted by accuracy (highest first).
pub struct IpScores(Vec<HeadScore>);

/// Dense row-major `f64` matrix.
pub struct IpMatrix(Matrix);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpHeadScore {
    pub layer: usize,
    pub head: usize,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_eval: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(IpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::MissingFile { .. } => IpStatus::Io,
            Error::Json { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::TrailingBytes { .. } => IpStatus::Format,
            Error::DimensionMismatch(_) | Error::ShapeMismatch(_) => IpStatus::Shape,
            Error::Infeasible(_) => IpStatus::Infeasible,
            Error::NonFinite { .. }
            | Error::ZeroNorm(_)
            | Error::ZeroVariance
            | Error::NonConvergence { .. }
            | Error::Divergence { .. } => IpStatus::Numerical,
            _ => IpStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IpStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IpStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            IpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(IpStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(IpStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(IpStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Parses an optional JSON config; null or empty means defaults.
unsafe fn config_arg<T: serde::de::DeserializeOwned + Default>(
    p: *const c_char,
) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = str_arg(p, "config_json")?;
    if s.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(s).map_err(|e| invalid(format!("config_json: {e}")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains a nul byte"))
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn ip_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ip_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads and validates a bundle directory.
///
/// # Safety
/// `dir` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_bundle_load(dir: *const c_char, out: *mut *mut IpBundle) -> IpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let bundle = load_bundle(dir)?;
        *out = Box::into_raw(Box::new(IpBundle(bundle)));
        Ok(())
    })
}

/// Generates a synthetic bundle from a JSON synthesis config.
///
/// # Safety
/// `config_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_synth_bundle(
    config_json: *const c_char,
    out: *mut *mut IpBundle,
) -> IpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let cfg: SynthConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| invalid(format!("config_json: {e}")))?;
        *out = Box::into_raw(Box::new(IpBundle(generate_bundle(&cfg)?)));
        Ok(())
    })
}

/// Writes a bundle to `dir` (created if missing).
///
/// # Safety
/// `bundle` must be a live handle; `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ip_bundle_write(bundle: *const IpBundle, dir: *const c_char) -> IpStatus {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        write_bundle(&b.0, str_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Reports class, instance and head counts and the head dimension.
/// Any output pointer may be null.
///
/// # Safety
/// `bundle` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_bundle_shape(
    bundle: *const IpBundle,
    n_classes: *mut usize,
    n_instances: *mut usize,
    n_heads: *mut usize,
    head_dim: *mut usize,
) -> IpStatus {
    guard(|| {
        let b = &ref_arg(bundle, "bundle")?.0;
        for (p, v) in [
            (n_classes, b.n_classes()),
            (n_instances, b.n_instances()),
            (n_heads, b.head_ids().len()),
            (head_dim, b.head_dim()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `bundle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ip_bundle_free(bundle: *mut IpBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

unsafe fn score_with(
    bundle: *const IpBundle,
    out: *mut *mut IpScores,
    f: impl FnOnce(&ActivationBundle) -> Result<Vec<HeadScore>, Failure>,
) -> IpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let b = ref_arg(bundle, "bundle")?;
        *out = Box::into_raw(Box::new(IpScores(f(&b.0)?)));
        Ok(())
    })
}

/// Zero-shot scores of every head.
///
/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ip_probe_zeroshot(
    bundle: *const IpBundle,
    out: *mut *mut IpScores,
) -> IpStatus {
    score_with(bundle, out, |b| Ok(probe::zeroshot_scores(b, EvalOptions::default())?))
}

/// Trains a contrastive probe per head and scores it. `config_json` may
/// be null for defaults.
///
/// # Safety
/// `bundle` must be a live handle; `config_json` null or nul-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_probe_unsupervised(
    bundle: *const IpBundle,
    config_json: *const c_char,
    out: *mut *mut IpScores,
) -> IpStatus {
    score_with(bundle, out, |b| {
        let cfg: ProbeTrainConfig = config_arg(config_json)?;
        Ok(unsupervised_scores(b, &cfg, EvalOptions::default())?.0)
    })
}

/// Trains a sparse autoencoder per head and scores it. `config_json` may
/// be null for defaults.
///
/// # Safety
/// As for [`ip_probe_unsupervised`].
#[no_mangle]
pub unsafe extern "C" fn ip_sae_classify(
    bundle: *const IpBundle,
    config_json: *const c_char,
    out: *mut *mut IpScores,
) -> IpStatus {
    score_with(bundle, out, |b| {
        let cfg: SaeConfig = config_arg(config_json)?;
        Ok(sae_scores(b, &cfg, EvalOptions::default())?.0)
    })
}

/// Number of heads in a score set (0 for null).
///
/// # Safety
/// `scores` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ip_scores_len(scores: *const IpScores) -> usize {
    scores.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `scores` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_scores_get(
    scores: *const IpScores,
    index: usize,
    out: *mut IpHeadScore,
) -> IpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let s = ref_arg(scores, "scores")?;
        let h = s
            .0
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range ({} heads)", s.0.len())))?;
        *out = IpHeadScore {
            layer: h.layer,
            head: h.head,
            accuracy: h.accuracy,
            n_correct: h.n_correct,
            n_eval: h.n_eval,
        };
        Ok(())
    })
}

/// Scores as a JSON array; release with [`ip_string_free`].
///
/// # Safety
/// `scores` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_scores_to_json(
    scores: *const IpScores,
    out: *mut *mut c_char,
) -> IpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let s = ref_arg(scores, "scores")?;
        let json = serde_json::to_string(&s.0).map_err(|e| invalid(e.to_string()))?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// # Safety
/// `scores` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ip_scores_free(scores: *mut IpScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

/// Zero-shot class of one activation vector at `(layer, head)`.
///
/// # Safety
/// `bundle` must be a live handle; `h` must point to `len` doubles;
/// `out_class` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_classify(
    bundle: *const IpBundle,
    layer: usize,
    head: usize,
    h: *const f64,
    len: usize,
    out_class: *mut usize,
) -> IpStatus {
    guard(|| {
        out_arg(out_class, "out_class")?;
        let b = &ref_arg(bundle, "bundle")?.0;
        if h.is_null() {
            return Err(Failure(IpStatus::NullPointer, "h is null".into()));
        }
        let id = HeadId::new(layer, head);
        let directions = probe::zeroshot_directions(b.class_acts(id)?)?;
        let row = std::slice::from_raw_parts(h, len);
        *out_class = probe::classify(row, &directions)?;
        Ok(())
    })
}

/// Reads an ACTB file into memory.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_matrix_read(path: *const c_char, out: *mut *mut IpMatrix) -> IpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = read_actbin(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(IpMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `matrix` must be a live handle; non-null outputs writable.
#[no_mangle]
pub unsafe extern "C" fn ip_matrix_shape(
    matrix: *const IpMatrix,
    rows: *mut usize,
    cols: *mut usize,
) -> IpStatus {
    guard(|| {
        let m = &ref_arg(matrix, "matrix")?.0;
        if !rows.is_null() {
            *rows = m.rows();
        }
        if !cols.is_null() {
            *cols = m.cols();
        }
        Ok(())
    })
}

/// Row-major data, `rows * cols` doubles, owned by the handle. Null for a
/// null handle.
///
/// # Safety
/// `matrix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ip_matrix_data(matrix: *const IpMatrix) -> *const f64 {
    matrix.as_ref().map_or(ptr::null(), |m| m.0.data().as_ptr())
}

/// # Safety
/// `matrix` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ip_matrix_free(matrix: *mut IpMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Trains one modular-division transformer and returns its metrics as
/// JSON; release with [`ip_string_free`].
///
/// # Safety
/// `config_json` must be a nul-terminated string; `metrics_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ip_grok_run(
    config_json: *const c_char,
    metrics_json: *mut *mut c_char,
) -> IpStatus {
    guard(|| {
        out_arg(metrics_json, "metrics_json")?;
        let cfg: GrokConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| invalid(format!("config_json: {e}")))?;
        let run = train_run(&cfg)?;
        let json = serde_json::to_string(&run.metrics).map_err(|e| invalid(e.to_string()))?;
        *metrics_json = into_c_string(json)?;
        Ok(())
    })
}
