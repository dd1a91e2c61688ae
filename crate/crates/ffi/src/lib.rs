//! C ABI for the magdi-lab toolkit.
//!
//! Conventions:
//! - Handles (`MagdiCorpus`, `MagdiModel`) are opaque; free them with the
//!   matching `*_free` function exactly once.
//! - Functions returning `MagdiStatus` report failure through the status
//!   code; functions returning strings return NULL on failure. Either way
//!   `magdi_last_error_message` yields a description of the most recent
//!   error on the calling thread.
//! - Every returned `char*` is owned by the caller and must be released
//!   with `magdi_string_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use magdi_lab::checkpoint::load_student;
use magdi_lab::eval::{evaluate, DEFAULT_MAX_NEW_TOKENS};
use magdi_lab::graph::{corpus_stats, filter_corpus, read_corpus, Mag, StructureClass};
use magdi_lab::model::{DecodeMode, StudentModel};
use magdi_lab::seeding::rng_for;
use magdi_lab::sim::{gen_corpus, read_testset, SimConfig};
use magdi_lab::train::{train, TrainConfig};

/// Status codes returned by fallible ABI calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagdiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: impl Into<String>) {
    let text = message.into();
    let cstring = CString::new(text.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message contained NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Loaded corpus of interaction graphs.
pub struct MagdiCorpus {
    graphs: Vec<Mag>,
}

/// Loaded student model (inference view of a checkpoint).
pub struct MagdiModel {
    student: StudentModel,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, MagdiStatus> {
    if ptr.is_null() {
        set_last_error(format!("{name} is NULL"));
        return Err(MagdiStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error(format!("{name} is not valid UTF-8"));
        MagdiStatus::InvalidUtf8
    })
}

fn guarded_status(f: impl FnOnce() -> MagdiStatus) -> MagdiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            MagdiStatus::Internal
        }
    }
}

fn guarded_ptr<T>(f: impl FnOnce() -> *mut T) -> *mut T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(ptr) => ptr,
        Err(_) => {
            set_last_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

fn string_out(text: String) -> *mut c_char {
    match CString::new(text) {
        Ok(cstring) => cstring.into_raw(),
        Err(_) => {
            set_last_error("output contained NUL");
            std::ptr::null_mut()
        }
    }
}

/// Library version as a caller-owned string.
#[no_mangle]
pub extern "C" fn magdi_version() -> *mut c_char {
    string_out(env!("CARGO_PKG_VERSION").to_string())
}

/// Description of the most recent error on this thread, or NULL when the
/// last call succeeded. Caller owns the string.
#[no_mangle]
pub extern "C" fn magdi_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a magdi function and not
/// yet freed; NULL is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn magdi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a newline-delimited JSON corpus from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid location for a
/// handle pointer.
#[no_mangle]
pub unsafe extern "C" fn magdi_corpus_open(
    path: *const c_char,
    out: *mut *mut MagdiCorpus,
) -> MagdiStatus {
    guarded_status(|| {
        if out.is_null() {
            set_last_error("out is NULL");
            return MagdiStatus::NullPointer;
        }
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match read_corpus(Path::new(path)) {
            Ok(graphs) => {
                clear_last_error();
                *out = Box::into_raw(Box::new(MagdiCorpus { graphs }));
                MagdiStatus::Ok
            }
            Err(err) => {
                set_last_error(err.to_string());
                MagdiStatus::Io
            }
        }
    })
}

/// Number of graphs in a corpus; 0 for NULL.
///
/// # Safety
/// `corpus` must be NULL or a live handle from `magdi_corpus_open`.
#[no_mangle]
pub unsafe extern "C" fn magdi_corpus_len(corpus: *const MagdiCorpus) -> usize {
    if corpus.is_null() {
        return 0;
    }
    (*corpus).graphs.len()
}

/// Round/agent/structure breakdown of a corpus as a JSON string.
///
/// # Safety
/// `corpus` must be a live handle from `magdi_corpus_open`.
#[no_mangle]
pub unsafe extern "C" fn magdi_corpus_stats_json(corpus: *const MagdiCorpus) -> *mut c_char {
    guarded_ptr(|| {
        if corpus.is_null() {
            set_last_error("corpus is NULL");
            return std::ptr::null_mut();
        }
        match corpus_stats(&(*corpus).graphs) {
            Ok(stats) => {
                clear_last_error();
                string_out(serde_json::to_string(&stats).expect("stats serialize"))
            }
            Err(err) => {
                set_last_error(err.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// New corpus keeping only graphs with at most `max_rounds` post-initial
/// rounds (0..=3), mirroring the denser-graph removal ablation.
///
/// # Safety
/// `corpus` must be a live handle; `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn magdi_corpus_filter_max_rounds(
    corpus: *const MagdiCorpus,
    max_rounds: u32,
    out: *mut *mut MagdiCorpus,
) -> MagdiStatus {
    guarded_status(|| {
        if corpus.is_null() || out.is_null() {
            set_last_error("corpus or out is NULL");
            return MagdiStatus::NullPointer;
        }
        let Ok(cap) = StructureClass::from_rounds(max_rounds as usize) else {
            set_last_error(format!("max_rounds {max_rounds} outside 0..=3"));
            return MagdiStatus::InvalidArgument;
        };
        let kept = filter_corpus(&(*corpus).graphs, |class| class <= cap);
        clear_last_error();
        *out = Box::into_raw(Box::new(MagdiCorpus { graphs: kept }));
        MagdiStatus::Ok
    })
}

/// Release a corpus handle.
///
/// # Safety
/// `corpus` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn magdi_corpus_free(corpus: *mut MagdiCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Simulate a corpus described by a JSON `SimConfig` and write it to
/// `out_path`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn magdi_generate_corpus(
    config_json: *const c_char,
    out_path: *const c_char,
) -> MagdiStatus {
    guarded_status(|| {
        let config = match cstr_arg(config_json, "config_json") {
            Ok(text) => match serde_json::from_str::<SimConfig>(text) {
                Ok(config) => config,
                Err(err) => {
                    set_last_error(format!("bad config: {err}"));
                    return MagdiStatus::InvalidArgument;
                }
            },
            Err(status) => return status,
        };
        let out_path = match cstr_arg(out_path, "out_path") {
            Ok(p) => PathBuf::from(p),
            Err(status) => return status,
        };
        match gen_corpus(&config, &out_path) {
            Ok(_) => {
                clear_last_error();
                MagdiStatus::Ok
            }
            Err(err) => {
                set_last_error(err.to_string());
                MagdiStatus::Io
            }
        }
    })
}

/// Run a training job described by a JSON `TrainConfig`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn magdi_train(config_json: *const c_char) -> MagdiStatus {
    guarded_status(|| {
        let config = match cstr_arg(config_json, "config_json") {
            Ok(text) => match serde_json::from_str::<TrainConfig>(text) {
                Ok(config) => config,
                Err(err) => {
                    set_last_error(format!("bad config: {err}"));
                    return MagdiStatus::InvalidArgument;
                }
            },
            Err(status) => return status,
        };
        match train(&config) {
            Ok(_) => {
                clear_last_error();
                MagdiStatus::Ok
            }
            Err(err) => {
                set_last_error(err.to_string());
                MagdiStatus::Io
            }
        }
    })
}

/// Load the inference view (student only) of a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid location.
#[no_mangle]
pub unsafe extern "C" fn magdi_model_open(
    path: *const c_char,
    out: *mut *mut MagdiModel,
) -> MagdiStatus {
    guarded_status(|| {
        if out.is_null() {
            set_last_error("out is NULL");
            return MagdiStatus::NullPointer;
        }
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_student(Path::new(path)) {
            Ok(student) => {
                clear_last_error();
                *out = Box::into_raw(Box::new(MagdiModel { student }));
                MagdiStatus::Ok
            }
            Err(err) => {
                set_last_error(err.to_string());
                MagdiStatus::Io
            }
        }
    })
}

/// Greedy zero-shot generation. Returns a JSON object with fields `chain`,
/// `answer`, and `n_tokens`, or NULL on failure.
///
/// # Safety
/// `model` must be a live handle; `question` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn magdi_model_generate(
    model: *const MagdiModel,
    question: *const c_char,
    max_new_tokens: usize,
) -> *mut c_char {
    guarded_ptr(|| {
        if model.is_null() {
            set_last_error("model is NULL");
            return std::ptr::null_mut();
        }
        let question = match cstr_arg(question, "question") {
            Ok(q) => q,
            Err(_) => return std::ptr::null_mut(),
        };
        let budget = if max_new_tokens == 0 {
            DEFAULT_MAX_NEW_TOKENS
        } else {
            max_new_tokens
        };
        let mut rng = rng_for(0, "ffi/generate");
        match (*model)
            .student
            .generate(question, DecodeMode::Greedy, budget, &mut rng)
        {
            Ok(generation) => {
                clear_last_error();
                string_out(serde_json::to_string(&generation).expect("generation serialize"))
            }
            Err(err) => {
                set_last_error(err.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// Evaluate a model on a newline-delimited JSON testset file; returns the
/// evaluation report as JSON, or NULL on failure.
///
/// # Safety
/// `model` must be a live handle; `test_path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn magdi_model_eval_json(
    model: *const MagdiModel,
    test_path: *const c_char,
) -> *mut c_char {
    guarded_ptr(|| {
        if model.is_null() {
            set_last_error("model is NULL");
            return std::ptr::null_mut();
        }
        let path = match cstr_arg(test_path, "test_path") {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        let testset = match read_testset(Path::new(path)) {
            Ok(testset) => testset,
            Err(err) => {
                set_last_error(err.to_string());
                return std::ptr::null_mut();
            }
        };
        match evaluate(&(*model).student, &testset, DEFAULT_MAX_NEW_TOKENS) {
            Ok(report) => {
                clear_last_error();
                string_out(serde_json::to_string(&report).expect("report serialize"))
            }
            Err(err) => {
                set_last_error(err.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// Release a model handle.
///
/// # Safety
/// `model` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn magdi_model_free(model: *mut MagdiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
