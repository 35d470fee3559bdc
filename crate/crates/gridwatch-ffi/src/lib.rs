//! C ABI for embedding the inspection engine in other languages.
//!
//! Handles are opaque; every function returns a `GwStatus` code and reports
//! detail through `gw_last_error`. Strings returned through out-parameters
//! are owned by the library and must be released with `gw_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gridwatch::alert::{AlertSink, ClockMode};
use gridwatch::engine::{Engine, EngineOptions};
use gridwatch::model::load_model;
use gridwatch::rules::{export_rules, generate_rules, import_rules, RuleConfig, SpecificationBase};
use gridwatch::RawPacket;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GwStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ValidationError = 4,
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c =
        CString::new(message).unwrap_or_else(|_| CString::new("error message had NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Message for the most recent failure on this thread, or NULL.
/// The pointer stays valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn gw_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Compiled rule set handle.
pub struct GwRules(SpecificationBase);

/// Inspection engine handle: rules, connection table and alert sink.
pub struct GwEngine {
    engine: Engine,
    sink: AlertSink,
    drained: usize,
}

unsafe fn opt_str<'a>(ptr: *const c_char) -> Result<&'a str, GwStatus> {
    if ptr.is_null() {
        set_error("null string argument".into());
        return Err(GwStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|e| {
        set_error(format!("invalid UTF-8: {e}"));
        GwStatus::InvalidUtf8
    })
}

fn out_string(s: String, out: *mut *mut c_char) -> GwStatus {
    match CString::new(s) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            GwStatus::Ok
        }
        Err(e) => {
            set_error(format!("string contains NUL: {e}"));
            GwStatus::Internal
        }
    }
}

/// Compile a rule document from model and configuration JSON.
///
/// # Safety
/// `gim_json` and `config_json` must be NUL-terminated strings; `out` must
/// be a valid pointer. On success `*out` owns a new handle, released with
/// `gw_rules_free`.
#[no_mangle]
pub unsafe extern "C" fn gw_rules_compile(
    gim_json: *const c_char,
    config_json: *const c_char,
    out: *mut *mut GwRules,
) -> GwStatus {
    if out.is_null() {
        set_error("null out pointer".into());
        return GwStatus::NullArgument;
    }
    let gim_text = match opt_str(gim_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let config_text = match opt_str(config_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let gim = match load_model(gim_text.as_bytes()) {
        Ok(g) => g,
        Err(e) => {
            set_error(e.to_string());
            return GwStatus::ParseError;
        }
    };
    let config = match RuleConfig::load(config_text.as_bytes()) {
        Ok(c) => c,
        Err(e) => {
            set_error(e.to_string());
            return GwStatus::ParseError;
        }
    };
    match generate_rules(&gim, &config) {
        Ok(sb) => {
            *out = Box::into_raw(Box::new(GwRules(sb)));
            GwStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            GwStatus::ValidationError
        }
    }
}

/// Parse and verify an exported rule document.
///
/// # Safety
/// `document` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gw_rules_import(
    document: *const c_char,
    out: *mut *mut GwRules,
) -> GwStatus {
    if out.is_null() {
        set_error("null out pointer".into());
        return GwStatus::NullArgument;
    }
    let text = match opt_str(document) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match import_rules(text) {
        Ok(sb) => {
            *out = Box::into_raw(Box::new(GwRules(sb)));
            GwStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            GwStatus::ParseError
        }
    }
}

/// Serialize a rule handle to its canonical document.
///
/// # Safety
/// `rules` must be a live handle from this library; `out` must be valid.
/// The returned string is released with `gw_string_free`.
#[no_mangle]
pub unsafe extern "C" fn gw_rules_export(rules: *const GwRules, out: *mut *mut c_char) -> GwStatus {
    if rules.is_null() || out.is_null() {
        set_error("null argument".into());
        return GwStatus::NullArgument;
    }
    out_string(export_rules(&(*rules).0), out)
}

/// Release a rule handle.
///
/// # Safety
/// `rules` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gw_rules_free(rules: *mut GwRules) {
    if !rules.is_null() {
        drop(Box::from_raw(rules));
    }
}

/// Create an engine bound to a rule set.
///
/// # Safety
/// `rules` must be a live handle; `out` must be valid. The rules are
/// copied, so the handle may be freed afterwards.
#[no_mangle]
pub unsafe extern "C" fn gw_engine_new(
    rules: *const GwRules,
    assume_started: bool,
    out: *mut *mut GwEngine,
) -> GwStatus {
    if rules.is_null() || out.is_null() {
        set_error("null argument".into());
        return GwStatus::NullArgument;
    }
    let engine = Engine::new((*rules).0.clone(), EngineOptions { assume_started });
    *out = Box::into_raw(Box::new(GwEngine {
        engine,
        sink: AlertSink::new(ClockMode::Wall),
        drained: 0,
    }));
    GwStatus::Ok
}

/// Inspect one Ethernet frame. `out_alerts` receives the number of alerts
/// this packet raised.
///
/// # Safety
/// `engine` must be a live handle, `data` must point to `len` readable
/// bytes, and `out_alerts` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn gw_engine_inspect(
    engine: *mut GwEngine,
    ts_sec: u64,
    ts_nsec: u32,
    data: *const u8,
    len: usize,
    out_alerts: *mut usize,
) -> GwStatus {
    if engine.is_null() || (data.is_null() && len > 0) {
        set_error("null argument".into());
        return GwStatus::NullArgument;
    }
    let handle = &mut *engine;
    let bytes = if len == 0 {
        &[][..]
    } else {
        std::slice::from_raw_parts(data, len)
    };
    let raw = RawPacket::new(ts_sec, ts_nsec, bytes.to_vec());
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        handle.sink.note_capture_start(raw.ts_micros());
        let report = handle.engine.inspect(&raw);
        for draft in &report.violations {
            handle.sink.emit(draft);
        }
        report.violations.len()
    }));
    match outcome {
        Ok(n) => {
            if !out_alerts.is_null() {
                *out_alerts = n;
            }
            GwStatus::Ok
        }
        Err(_) => {
            set_error("panic during inspection".into());
            GwStatus::Internal
        }
    }
}

/// Drain alerts emitted since the last drain, as one JSON record per line.
///
/// # Safety
/// `engine` must be a live handle and `out` valid. The returned string is
/// released with `gw_string_free`.
#[no_mangle]
pub unsafe extern "C" fn gw_engine_drain_alerts(
    engine: *mut GwEngine,
    out: *mut *mut c_char,
) -> GwStatus {
    if engine.is_null() || out.is_null() {
        set_error("null argument".into());
        return GwStatus::NullArgument;
    }
    let handle = &mut *engine;
    let fresh = &handle.sink.records()[handle.drained..];
    let mut text = String::new();
    for record in fresh {
        match serde_json::to_string(record) {
            Ok(line) => {
                text.push_str(&line);
                text.push('\n');
            }
            Err(e) => {
                set_error(format!("serialization failed: {e}"));
                return GwStatus::Internal;
            }
        }
    }
    handle.drained = handle.sink.records().len();
    out_string(text, out)
}

/// Release an engine handle.
///
/// # Safety
/// `engine` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gw_engine_free(engine: *mut GwEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
