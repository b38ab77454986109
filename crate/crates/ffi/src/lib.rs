//! C ABI over the experiment runner and a few closed-form kernel quantities.
//!
//! Every function returns an [`HlStatus`]; on failure [`hl_last_error`] describes it.
//! Strings handed out by the library are freed with [`hl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ham_levy::cli::{list_presets, run, ExperimentConfig};
use ham_levy::kernels::{riesz_constant, wave_kernel_lp_norm};
use ham_levy::report::{ExperimentReport, Status};
use ham_levy::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Domain = 4,
    Numeric = 5,
    Resource = 6,
    Unsupported = 7,
    Io = 8,
    NotFound = 9,
    Panic = 10,
}

/// Experiment verdict; the values match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HlVerdict {
    Pass = 0,
    Fail = 2,
    Inconclusive = 3,
}

/// Parsed experiment configuration (opaque).
pub struct HlConfig {
    inner: ExperimentConfig,
}

/// Finished experiment report (opaque).
pub struct HlReport {
    inner: ExperimentReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HlStatus {
    match e {
        Error::Domain(_) => HlStatus::Domain,
        Error::Numeric { .. } => HlStatus::Numeric,
        Error::Resource(_) => HlStatus::Resource,
        Error::Unsupported(_) => HlStatus::Unsupported,
        Error::Config(_) => HlStatus::Config,
        Error::Io(_) => HlStatus::Io,
    }
}

struct Fail(HlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, turning errors and panics into a status plus the last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HlStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            HlStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass pointers obtained from this library or valid C objects.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(HlStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: as above; the caller owns the output slot.
    unsafe { p.as_mut() }.ok_or_else(|| Fail(HlStatus::NullPointer, format!("{what} is null")))
}

fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(HlStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null, NUL-terminated by contract.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Fail(HlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    let slot = out_ptr(out, "output string")?;
    let c = CString::new(s).map_err(|_| Fail(HlStatus::InvalidUtf8, "output contains NUL".into()))?;
    *slot = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn hl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates config text. On success `*out` owns a new handle.
#[no_mangle]
pub extern "C" fn hl_config_parse(text: *const c_char, out: *mut *mut HlConfig) -> HlStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        *slot = ptr::null_mut();
        let cfg = ExperimentConfig::parse(read_str(text, "text")?)?;
        *slot = Box::into_raw(Box::new(HlConfig { inner: cfg }));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn hl_config_set_seed(cfg: *mut HlConfig, seed: u64) -> HlStatus {
    guard(|| {
        out_ptr(cfg, "config")?.inner.seed = seed;
        Ok(())
    })
}

/// Sets the worker count; 0 means the global thread pool.
#[no_mangle]
pub extern "C" fn hl_config_set_workers(cfg: *mut HlConfig, workers: usize) -> HlStatus {
    guard(|| {
        out_ptr(cfg, "config")?.inner.workers = (workers > 0).then_some(workers);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn hl_config_free(cfg: *mut HlConfig) {
    if !cfg.is_null() {
        // SAFETY: produced by Box::into_raw in hl_config_parse.
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Runs the configured experiment. On success `*out` owns a new report handle.
#[no_mangle]
pub extern "C" fn hl_run(cfg: *const HlConfig, out: *mut *mut HlReport) -> HlStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        *slot = ptr::null_mut();
        let rep = run(&non_null(cfg, "config")?.inner)?;
        *slot = Box::into_raw(Box::new(HlReport { inner: rep }));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn hl_report_verdict(rep: *const HlReport, out: *mut HlVerdict) -> HlStatus {
    guard(|| {
        let v = match non_null(rep, "report")?.inner.status {
            Status::Pass => HlVerdict::Pass,
            Status::Fail => HlVerdict::Fail,
            Status::Inconclusive => HlVerdict::Inconclusive,
        };
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// First value of the named statistic; `NotFound` if absent.
#[no_mangle]
pub extern "C" fn hl_report_value(rep: *const HlReport, statistic: *const c_char, out: *mut f64) -> HlStatus {
    guard(|| {
        let name = read_str(statistic, "statistic")?;
        let v = non_null(rep, "report")?.inner.value(name).ok_or_else(|| Fail(HlStatus::NotFound, format!("no statistic '{name}'")))?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// CSV body (no timestamp line). Free with `hl_string_free`.
#[no_mangle]
pub extern "C" fn hl_report_csv(rep: *const HlReport, out: *mut *mut c_char) -> HlStatus {
    guard(|| give_string(non_null(rep, "report")?.inner.csv_body(), out))
}

/// JSON report with the config embedded. Free with `hl_string_free`.
#[no_mangle]
pub extern "C" fn hl_report_json(rep: *const HlReport, out: *mut *mut c_char) -> HlStatus {
    guard(|| give_string(non_null(rep, "report")?.inner.to_json()?, out))
}

#[no_mangle]
pub extern "C" fn hl_report_free(rep: *mut HlReport) {
    if !rep.is_null() {
        // SAFETY: produced by Box::into_raw in hl_run.
        drop(unsafe { Box::from_raw(rep) });
    }
}

/// Preset table as printed by `ham-levy list-presets`. Free with `hl_string_free`.
#[no_mangle]
pub extern "C" fn hl_list_presets(out: *mut *mut c_char) -> HlStatus {
    guard(|| give_string(list_presets(), out))
}

#[no_mangle]
pub extern "C" fn hl_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in this library.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// ‖G_t‖_{L^p} of the wave kernel.
#[no_mangle]
pub extern "C" fn hl_wave_kernel_lp_norm(t: f64, p: f64, out: *mut f64) -> HlStatus {
    guard(|| {
        *out_ptr(out, "out")? = wave_kernel_lp_norm(t, p)?;
        Ok(())
    })
}

/// Normalizing constant of the Riesz kernel R_{1,α}.
#[no_mangle]
pub extern "C" fn hl_riesz_constant(alpha: f64, out: *mut f64) -> HlStatus {
    guard(|| {
        *out_ptr(out, "out")? = riesz_constant(alpha)?;
        Ok(())
    })
}
