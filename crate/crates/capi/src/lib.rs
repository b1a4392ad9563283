//! C ABI for the adcal library: opaque handles, status codes, and a
//! thread-local last-error message.
//!
//! Conventions:
//! - Functions return [`AdcalStatus`]; results come back through out
//!   parameters.
//! - Handles are created by `*_load` / `*_from_json` functions and released
//!   by the matching `*_free`; strings returned through out parameters are
//!   released with [`adcal_string_free`].
//! - On any non-OK status, [`adcal_last_error_message`] describes the error
//!   until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use adcal::jsonio::{load_annotations, load_predictions, predictions_to_json, AnnotationSet};
use adcal::metrics::{evaluate_dataset, EvalOptions};
use adcal::model::Prediction;
use adcal::posthoc::{
    calibrate_predictions, fit_calibrator_bank, CalibratorBank, FitOptions, RenormMode,
};
use adcal::simulate::{simulate_dataset, SimulationConfig};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdcalStatus {
    Ok = 0,
    NullArgument = 1,
    Utf8 = 2,
    Io = 3,
    Parse = 4,
    Invalid = 5,
    Panic = 6,
}

/// Loaded annotations plus dataset meta.
pub struct AdcalAnnotations {
    set: AnnotationSet,
}

/// Loaded, validated predictions.
pub struct AdcalPredictions {
    preds: Vec<Prediction>,
}

/// A fitted calibrator bank (J class maps + 4 variance maps).
pub struct AdcalBank {
    bank: CalibratorBank,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &adcal::Error) -> AdcalStatus {
    match err {
        adcal::Error::Io { .. } => AdcalStatus::Io,
        adcal::Error::Parse { .. } => AdcalStatus::Parse,
        adcal::Error::Invalid(_) => AdcalStatus::Invalid,
    }
}

fn guard(body: impl FnOnce() -> AdcalStatus) -> AdcalStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            AdcalStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be non-null and point to a NUL-terminated string.
unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, AdcalStatus> {
    if ptr.is_null() {
        set_error("null argument");
        return Err(AdcalStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        AdcalStatus::Utf8
    })
}

fn string_out(out: *mut *mut c_char, text: String) -> AdcalStatus {
    let cleaned = text.replace('\0', " ");
    match CString::new(cleaned) {
        Ok(s) => {
            unsafe { *out = s.into_raw() };
            AdcalStatus::Ok
        }
        Err(_) => {
            set_error("output contained interior NUL");
            AdcalStatus::Invalid
        }
    }
}

fn parse_options(options_json: *const c_char) -> Result<EvalOptions, AdcalStatus> {
    if options_json.is_null() {
        return Ok(EvalOptions::default());
    }
    let text = unsafe { cstr_arg(options_json)? };
    serde_json::from_str(text).map_err(|e| {
        set_error(&format!("options: {e}"));
        AdcalStatus::Parse
    })
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn adcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread; valid until the next
/// failing call. Do not free.
#[no_mangle]
pub extern "C" fn adcal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned through an out parameter.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn adcal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load and validate an annotations file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adcal_annotations_load(
    path: *const c_char,
    out: *mut *mut AdcalAnnotations,
) -> AdcalStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return AdcalStatus::NullArgument;
        }
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_annotations(Path::new(path)) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(AdcalAnnotations { set }));
                AdcalStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `ptr` must come from [`adcal_annotations_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn adcal_annotations_free(ptr: *mut AdcalAnnotations) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Number of images in a loaded annotation set.
///
/// # Safety
/// `ptr` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn adcal_annotations_num_images(ptr: *const AdcalAnnotations) -> usize {
    if ptr.is_null() {
        return 0;
    }
    (*ptr).set.images.len()
}

/// Load and validate a predictions file against the annotation set's meta.
///
/// # Safety
/// Pointer arguments must be valid; `out` receives an owned handle.
#[no_mangle]
pub unsafe extern "C" fn adcal_predictions_load(
    path: *const c_char,
    annotations: *const AdcalAnnotations,
    out: *mut *mut AdcalPredictions,
) -> AdcalStatus {
    guard(|| {
        if annotations.is_null() || out.is_null() {
            set_error("null argument");
            return AdcalStatus::NullArgument;
        }
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_predictions(Path::new(path), &(*annotations).set.meta) {
            Ok(preds) => {
                *out = Box::into_raw(Box::new(AdcalPredictions { preds }));
                AdcalStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `ptr` must come from a predictions-producing call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn adcal_predictions_free(ptr: *mut AdcalPredictions) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Number of predictions held by the handle.
///
/// # Safety
/// `ptr` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn adcal_predictions_len(ptr: *const AdcalPredictions) -> usize {
    if ptr.is_null() {
        return 0;
    }
    (*ptr).preds.len()
}

/// Serialize predictions to the canonical JSON text.
///
/// # Safety
/// `ptr` must be live; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn adcal_predictions_to_json(
    ptr: *const AdcalPredictions,
    out_json: *mut *mut c_char,
) -> AdcalStatus {
    guard(|| {
        if ptr.is_null() || out_json.is_null() {
            set_error("null argument");
            return AdcalStatus::NullArgument;
        }
        string_out(out_json, predictions_to_json(&(*ptr).preds))
    })
}

/// Run the full evaluation; the metrics report comes back as JSON.
///
/// `options_json` may be NULL for defaults, or a JSON object with any of
/// `min_iou`, `gamma`, `var_floor`, `zero_iou_guard`, `min_certainty`,
/// `weights`, `per_image`.
///
/// # Safety
/// Handles must be live; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn adcal_evaluate_json(
    annotations: *const AdcalAnnotations,
    predictions: *const AdcalPredictions,
    options_json: *const c_char,
    out_json: *mut *mut c_char,
) -> AdcalStatus {
    guard(|| {
        if annotations.is_null() || predictions.is_null() || out_json.is_null() {
            set_error("null argument");
            return AdcalStatus::NullArgument;
        }
        let opts = match parse_options(options_json) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let set = &(*annotations).set;
        let report = evaluate_dataset(&set.images, &(*predictions).preds, &set.meta, &opts);
        string_out(out_json, adcal::jsonio::to_canonical_json(&report))
    })
}

/// Fit the J + 4 isotonic calibrators on a validation split.
///
/// # Safety
/// Handles must be live; `out` receives an owned handle.
#[no_mangle]
pub unsafe extern "C" fn adcal_fit_calibrators(
    annotations: *const AdcalAnnotations,
    predictions: *const AdcalPredictions,
    options_json: *const c_char,
    out: *mut *mut AdcalBank,
) -> AdcalStatus {
    guard(|| {
        if annotations.is_null() || predictions.is_null() || out.is_null() {
            set_error("null argument");
            return AdcalStatus::NullArgument;
        }
        let eval = match parse_options(options_json) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let opts = FitOptions {
            eval,
            var_log_space: false,
        };
        let set = &(*annotations).set;
        match fit_calibrator_bank(&set.images, &(*predictions).preds, &set.meta, &opts) {
            Ok(bank) => {
                *out = Box::into_raw(Box::new(AdcalBank { bank }));
                AdcalStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `ptr` must come from a bank-producing call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn adcal_bank_free(ptr: *mut AdcalBank) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Serialize a calibrator bank to its JSON file format.
///
/// # Safety
/// `ptr` must be live; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn adcal_bank_to_json(
    ptr: *const AdcalBank,
    out_json: *mut *mut c_char,
) -> AdcalStatus {
    guard(|| {
        if ptr.is_null() || out_json.is_null() {
            set_error("null argument");
            return AdcalStatus::NullArgument;
        }
        string_out(out_json, adcal::jsonio::to_canonical_json(&(*ptr).bank))
    })
}

/// Parse a calibrator bank from its JSON file format.
///
/// # Safety
/// `json` must be NUL-terminated; `out` receives an owned handle.
#[no_mangle]
pub unsafe extern "C" fn adcal_bank_from_json(
    json: *const c_char,
    out: *mut *mut AdcalBank,
) -> AdcalStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return AdcalStatus::NullArgument;
        }
        let text = match cstr_arg(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match serde_json::from_str::<CalibratorBank>(text) {
            Ok(bank) => {
                *out = Box::into_raw(Box::new(AdcalBank { bank }));
                AdcalStatus::Ok
            }
            Err(e) => {
                set_error(&format!("bank: {e}"));
                AdcalStatus::Parse
            }
        }
    })
}

/// Apply a calibrator bank: class probabilities and variances change, means
/// and certainties stay untouched.
///
/// # Safety
/// Handles must be live; `out` receives an owned handle.
#[no_mangle]
pub unsafe extern "C" fn adcal_bank_apply(
    bank: *const AdcalBank,
    predictions: *const AdcalPredictions,
    out: *mut *mut AdcalPredictions,
) -> AdcalStatus {
    guard(|| {
        if bank.is_null() || predictions.is_null() || out.is_null() {
            set_error("null argument");
            return AdcalStatus::NullArgument;
        }
        match calibrate_predictions(&(*predictions).preds, &(*bank).bank, RenormMode::Proportional)
        {
            Ok(preds) => {
                *out = Box::into_raw(Box::new(AdcalPredictions { preds }));
                AdcalStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Generate a synthetic dataset from a [`SimulationConfig`] JSON. The
/// annotations file text and the latent-truth file text come back separately.
///
/// # Safety
/// `config_json` must be NUL-terminated; out parameters receive owned
/// strings.
#[no_mangle]
pub unsafe extern "C" fn adcal_simulate_json(
    config_json: *const c_char,
    out_annotations_json: *mut *mut c_char,
    out_latent_json: *mut *mut c_char,
) -> AdcalStatus {
    guard(|| {
        if out_annotations_json.is_null() || out_latent_json.is_null() {
            set_error("null out pointer");
            return AdcalStatus::NullArgument;
        }
        let text = match cstr_arg(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config: SimulationConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("config: {e}"));
                return AdcalStatus::Parse;
            }
        };
        match simulate_dataset(&config) {
            Ok((latent, images)) => {
                let set = AnnotationSet {
                    meta: config.meta(),
                    images,
                };
                let status =
                    string_out(out_annotations_json, adcal::jsonio::to_canonical_json(&set));
                if status != AdcalStatus::Ok {
                    return status;
                }
                string_out(out_latent_json, adcal::jsonio::to_canonical_json(&latent))
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
