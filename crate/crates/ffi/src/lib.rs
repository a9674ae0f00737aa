//! C interface to cfx-core.
//!
//! Every function returns a [`CfxStatus`]. On failure a message is kept per
//! thread and can be read with [`cfx_last_error`]. Strings handed out by the
//! library are NUL-terminated UTF-8 JSON (or CSV/HTML for reports) and must
//! be released with [`cfx_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cfx_core::batch::{apply_overrides, render_report, BatchContext, ReportFormat};
use cfx_core::explain::{explain, RunConfig};
use cfx_core::project::{Project, ProjectSpec};
use cfx_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DataError = 4,
    ModelError = 5,
    ExplainError = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfxReportFormat {
    Json = 0,
    Csv = 1,
    Html = 2,
}

/// Opaque handle: a loaded dataset split and the model to explain.
pub struct CfxProject {
    inner: Project,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CfxStatus {
    match e {
        Error::InvalidArgument(_) | Error::UnknownFeature(_) | Error::NotNumeric(_) | Error::Arity { .. } => {
            CfxStatus::InvalidArgument
        }
        Error::Io { .. }
        | Error::Schema(_)
        | Error::MissingColumn(_)
        | Error::UnparseableNumber { .. }
        | Error::UnknownLevel { .. }
        | Error::Csv(_)
        | Error::ConstantFeature(_)
        | Error::SingleClass => CfxStatus::DataError,
        Error::NonFiniteLoss(_) | Error::Transport(_) | Error::Protocol(_) | Error::NotNormalized { .. } => {
            CfxStatus::ModelError
        }
        _ => CfxStatus::ExplainError,
    }
}

struct Failure(CfxStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), format!("{}: {e}", e.kind()))
    }
}

/// Run `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CfxStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside cfx".into());
            CfxStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CfxStatus::NullPointer, "null string argument".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CfxStatus::InvalidUtf8, "argument is not valid UTF-8".into()))
}

/// Null means "no overrides".
unsafe fn read_config(p: *const c_char) -> Result<RunConfig, Failure> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    let text = read_str(p)?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Failure(CfxStatus::InvalidArgument, format!("config JSON: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(Failure(CfxStatus::InvalidArgument, "config JSON must be an object".into()));
    };
    Ok(apply_overrides(&RunConfig::default(), &map)?)
}

fn hand_out(text: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(text).map_err(|_| Failure(CfxStatus::ExplainError, "output contains NUL".into()))?;
    // SAFETY: `out` was checked non-null by the caller
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn project_ref<'a>(p: *const CfxProject) -> Result<&'a CfxProject, Failure> {
    // SAFETY: non-null handles come from `cfx_project_open`
    unsafe { p.as_ref() }.ok_or_else(|| Failure(CfxStatus::NullPointer, "null project handle".into()))
}

fn check_out<T>(out: *mut *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure(CfxStatus::NullPointer, "null output pointer".into()))
    } else {
        Ok(())
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cfx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next cfx call on the same thread.
#[no_mangle]
pub extern "C" fn cfx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load data, split it and prepare the model described by `spec_json`
/// (same shape as the service's session request).
///
/// # Safety
/// `spec_json` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn cfx_project_open(spec_json: *const c_char, out: *mut *mut CfxProject) -> CfxStatus {
    guard(|| {
        check_out(out)?;
        let text = read_str(spec_json)?;
        let spec: ProjectSpec =
            serde_json::from_str(text).map_err(|e| Failure(CfxStatus::InvalidArgument, format!("project JSON: {e}")))?;
        let inner = Project::open(&spec)?;
        *out = Box::into_raw(Box::new(CfxProject { inner }));
        Ok(())
    })
}

/// # Safety
/// `project` must be null or a handle from `cfx_project_open` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfx_project_free(project: *mut CfxProject) {
    if !project.is_null() {
        drop(Box::from_raw(project));
    }
}

/// Number of rows in the test partition.
///
/// # Safety
/// `project` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfx_project_test_count(project: *const CfxProject, out: *mut usize) -> CfxStatus {
    guard(|| {
        let p = project_ref(project)?;
        if out.is_null() {
            return Err(Failure(CfxStatus::NullPointer, "null output pointer".into()));
        }
        *out = p.inner.test.len();
        Ok(())
    })
}

/// Explain test row `observation`. `config_json` holds run-config overrides
/// and may be null. The explanation is written to `*out_json` as JSON.
///
/// # Safety
/// Pointers must be valid; `config_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn cfx_explain(
    project: *const CfxProject,
    observation: usize,
    config_json: *const c_char,
    seed: u64,
    out_json: *mut *mut c_char,
) -> CfxStatus {
    guard(|| {
        check_out(out_json)?;
        let p = &project_ref(project)?.inner;
        let cfg = read_config(config_json)?;
        let x = p.test.rows.get(observation).ok_or_else(|| {
            Failure(CfxStatus::InvalidArgument, format!("test partition has no row {observation}"))
        })?;
        let e = explain(x, &p.model, &p.train, &cfg, seed)?;
        hand_out(serde_json::to_string(&e).expect("serializable"), out_json)
    })
}

/// Explain an observation given as comma-separated raw values.
///
/// # Safety
/// Pointers must be valid; `config_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn cfx_explain_values(
    project: *const CfxProject,
    values_csv: *const c_char,
    config_json: *const c_char,
    seed: u64,
    out_json: *mut *mut c_char,
) -> CfxStatus {
    guard(|| {
        check_out(out_json)?;
        let p = &project_ref(project)?.inner;
        let cfg = read_config(config_json)?;
        let cells: Vec<&str> = read_str(values_csv)?.split(',').collect();
        let x = p.train.observation_from_strings(&cells)?;
        let e = explain(&x, &p.model, &p.train, &cfg, seed)?;
        hand_out(serde_json::to_string(&e).expect("serializable"), out_json)
    })
}

/// Batch evaluation over the test partition, rendered as a report.
///
/// # Safety
/// Pointers must be valid; `config_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn cfx_batch(
    project: *const CfxProject,
    config_json: *const c_char,
    format: CfxReportFormat,
    out_text: *mut *mut c_char,
) -> CfxStatus {
    guard(|| {
        check_out(out_text)?;
        let p = &project_ref(project)?.inner;
        let cfg = read_config(config_json)?;
        let mut ctx = BatchContext::new(&p.train, p.test.rows.clone(), &p.model)?;
        let result = ctx.run("batch", &cfg)?;
        let format = match format {
            CfxReportFormat::Json => ReportFormat::Json,
            CfxReportFormat::Csv => ReportFormat::Csv,
            CfxReportFormat::Html => ReportFormat::Html,
        };
        hand_out(render_report(&result, format)?, out_text)
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
