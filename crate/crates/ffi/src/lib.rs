//! C ABI over the `dualsc` library.
//!
//! Every fallible function returns a [`DualscStatus`]. On failure a message
//! is kept per thread and can be read with [`dualsc_last_error`]. Strings
//! handed out by the library are owned by the caller and must be released
//! with [`dualsc_string_free`]; models with [`dualsc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dualsc::corpus::TaskDirection;
use dualsc::metrics;
use dualsc::pipeline::{DecodeOptions, Session};
use dualsc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualscStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Checkpoint = 5,
    Version = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque handle to a loaded checkpoint.
pub struct DualscModel {
    session: Session,
}

/// Corpus-level scores in percent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DualscScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub acc: f64,
    pub pairs: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(DualscStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DualscStatus::Io,
            Error::Checkpoint(_) => DualscStatus::Checkpoint,
            Error::Version { .. } => DualscStatus::Version,
            Error::Config(_) | Error::Contract(_) | Error::Parse { .. } | Error::Index(_) => {
                DualscStatus::InvalidArgument
            }
            _ => DualscStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DualscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DualscStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DualscStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DualscStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(DualscStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(DualscStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

fn to_c(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(DualscStatus::Internal, "output contains a NUL byte".into()))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn dualsc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dualsc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. `beam_width` of 0 selects the default width.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dualsc_model_load(
    path: *const c_char,
    beam_width: u32,
    out: *mut *mut DualscModel,
) -> DualscStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = text(path, "path")?;
        let mut decode = DecodeOptions::default();
        if beam_width > 0 {
            decode.beam_width = beam_width as usize;
        }
        let session = Session::load(Path::new(path), decode)?;
        *out = Box::into_raw(Box::new(DualscModel { session }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`dualsc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dualsc_model_free(model: *mut DualscModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dualsc_model_vocab_size(model: *const DualscModel) -> usize {
    model.as_ref().map_or(0, |m| m.session.vocab.len())
}

unsafe fn infer(
    model: *const DualscModel,
    direction: TaskDirection,
    input: *const c_char,
    repair: bool,
    out: *mut *mut c_char,
) -> DualscStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| Failure(DualscStatus::NullPointer, "model is null".into()))?;
        let input = text(input, "input")?;
        let r = m.session.infer(direction, input, repair)?;
        *out = to_c(r.text)?;
        Ok(())
    })
}

/// Generates assembly for an English intent, optionally repairing operand
/// literals against the intent. The model handle may be shared across
/// threads.
///
/// # Safety
/// `model` must be a live handle, `intent` a NUL-terminated string and
/// `out` a valid pointer. The result must be freed with
/// [`dualsc_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dualsc_generate(
    model: *const DualscModel,
    intent: *const c_char,
    repair: bool,
    out: *mut *mut c_char,
) -> DualscStatus {
    infer(model, TaskDirection::Gen, intent, repair, out)
}

/// Summarizes assembly as English.
///
/// # Safety
/// As for [`dualsc_generate`].
#[no_mangle]
pub unsafe extern "C" fn dualsc_summarize(
    model: *const DualscModel,
    code: *const c_char,
    out: *mut *mut c_char,
) -> DualscStatus {
    infer(model, TaskDirection::Sum, code, false, out)
}

/// Rule-based literal repair of one generated line. `changed` may be null.
///
/// # Safety
/// `generated` and `intent` must be NUL-terminated strings, `out` a valid
/// pointer and `changed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn dualsc_repair(
    generated: *const c_char,
    intent: *const c_char,
    out: *mut *mut c_char,
    changed: *mut bool,
) -> DualscStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let (fixed, report) = dualsc::repair::repair(text(generated, "generated")?, text(intent, "intent")?);
        if !changed.is_null() {
            *changed = report.changed;
        }
        *out = to_c(fixed)?;
        Ok(())
    })
}

/// Scores `n` candidate/reference pairs, tokenized on whitespace.
///
/// # Safety
/// `candidates` and `references` must each point to `n` NUL-terminated
/// strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dualsc_score(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut DualscScores,
) -> DualscStatus {
    guard(|| {
        out_ptr(out, "out")?;
        if n == 0 {
            return Err(Failure(DualscStatus::InvalidArgument, "no pairs to score".into()));
        }
        if candidates.is_null() || references.is_null() {
            return Err(Failure(DualscStatus::NullPointer, "input array is null".into()));
        }
        let read = |arr: *const *const c_char, what: &str| -> Result<Vec<Vec<String>>, Failure> {
            std::slice::from_raw_parts(arr, n)
                .iter()
                .map(|&p| Ok(text(p, what)?.split_whitespace().map(str::to_owned).collect()))
                .collect()
        };
        let cands = read(candidates, "candidate")?;
        let refs = read(references, "reference")?;
        *out = DualscScores {
            bleu4: metrics::bleu4(&cands, &refs)?,
            rouge_l: metrics::rouge_l(&cands, &refs)?,
            meteor: metrics::meteor(&cands, &refs)?,
            acc: metrics::exact_match(&cands, &refs)?,
            pairs: n,
        };
        Ok(())
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dualsc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
