//! C ABI over the careflow engine.
//!
//! Structured values cross the boundary as UTF-8 JSON strings. Every function
//! returns a [`CfStatus`]; on failure, [`cf_last_error_message`] describes the
//! most recent error on the calling thread. Strings handed out through `out`
//! parameters belong to the caller and are released with [`cf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use careflow::criteria::{parse_rule, World};
use careflow::graph::Severity;
use careflow::necessity::{determine, select_cpt, ProcedureSpec};
use careflow::orchestrator::{run_scenario, Engine, Orchestrator, Scenario, ScenarioError, NAVIGATOR};
use careflow::patient::{default_as_of, load_record, snapshot_at, PatientRecord};
use chrono::NaiveDate;
use serde_json::json;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    NotFound = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfWorld {
    Open = 0,
    Closed = 1,
}

impl From<CfWorld> for World {
    fn from(w: CfWorld) -> World {
        match w {
            CfWorld::Open => World::Open,
            CfWorld::Closed => World::Closed,
        }
    }
}

/// Opaque engine handle: a care graph, guideline registry and code map.
pub struct CfEngine {
    engine: Arc<Engine>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(CfStatus, String);

type Outcome<T> = Result<T, Failure>;

fn fail<T>(status: CfStatus, message: impl ToString) -> Outcome<T> {
    Err(Failure(status, message.to_string()))
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

/// Runs `body`, records any failure or panic, and converts to a status.
fn guard(body: impl FnOnce() -> Outcome<()>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            CfStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CfStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return fail(CfStatus::NullArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(CfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn optional_text<'a>(p: *const c_char, what: &str) -> Outcome<Option<&'a str>> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn live<'a>(p: *const CfEngine) -> Outcome<&'a CfEngine> {
    p.as_ref().map_or_else(|| fail(CfStatus::NullArgument, "engine is null"), Ok)
}

unsafe fn emit(out: *mut *mut c_char, value: String) -> Outcome<()> {
    let s = CString::new(value).or_else(|_| fail(CfStatus::Internal, "output contains NUL"))?;
    *out = s.into_raw();
    Ok(())
}

fn check_out<T>(out: *mut *mut T) -> Outcome<()> {
    if out.is_null() {
        return fail(CfStatus::NullArgument, "out is null");
    }
    // SAFETY: checked non-null above; callers pass a writable slot.
    unsafe { *out = ptr::null_mut() };
    Ok(())
}

fn patient(document: &str) -> Outcome<PatientRecord> {
    load_record(document).or_else(|e| fail(CfStatus::Parse, format!("patient: {e}")))
}

fn as_of(record: &PatientRecord, date: Option<&str>) -> Outcome<NaiveDate> {
    match date {
        None => Ok(default_as_of(record)),
        Some(d) => d.parse().or_else(|e| fail(CfStatus::Parse, format!("as_of `{d}`: {e}"))),
    }
}

fn to_json(value: &impl serde::Serialize) -> Outcome<String> {
    serde_json::to_string(value).or_else(|e| fail(CfStatus::Internal, e))
}

/// Engine over the bundled ovarian diagnostic graph and guideline set.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_new_bundled(out: *mut *mut CfEngine) -> CfStatus {
    guard(|| {
        check_out(out)?;
        *out = Box::into_raw(Box::new(CfEngine { engine: Arc::new(Engine::bundled()) }));
        Ok(())
    })
}

/// Engine from graph, registry and code-map JSON documents. Documents with
/// validation errors are refused with `Validation`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_load(
    graph_json: *const c_char,
    registry_json: *const c_char,
    code_map_json: *const c_char,
    out: *mut *mut CfEngine,
) -> CfStatus {
    guard(|| {
        check_out(out)?;
        let graph = text(graph_json, "graph")?;
        let registry = text(registry_json, "registry")?;
        let code_map = text(code_map_json, "code map")?;
        let engine = Engine::from_documents(graph, registry, code_map).or_else(|e| fail(CfStatus::Parse, e))?;
        let errors: Vec<String> =
            engine.validate().into_iter().filter(|i| i.severity == Severity::Error).map(|i| i.to_string()).collect();
        if !errors.is_empty() {
            return fail(CfStatus::Validation, errors.join("; "));
        }
        *out = Box::into_raw(Box::new(CfEngine { engine: Arc::new(engine) }));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_free(engine: *mut CfEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Validation issues of the engine's assets as a JSON array.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_validate(engine: *const CfEngine, out: *mut *mut c_char) -> CfStatus {
    guard(|| {
        check_out(out)?;
        let e = live(engine)?;
        emit(out, to_json(&e.engine.validate())?)
    })
}

/// Medical-necessity determination for `code` as JSON. `as_of` is an
/// optional `YYYY-MM-DD` date; null means the record's latest date.
///
/// # Safety
/// `engine` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_determine(
    engine: *const CfEngine,
    patient_json: *const c_char,
    code: *const c_char,
    as_of_date: *const c_char,
    world: CfWorld,
    out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        check_out(out)?;
        let e = live(engine)?;
        let record = patient(text(patient_json, "patient")?)?;
        let code = text(code, "code")?;
        let code = code.parse().or_else(|err| fail(CfStatus::Parse, format!("code `{code}`: {err}")))?;
        let date = as_of(&record, optional_text(as_of_date, "as_of")?)?;
        let snapshot = snapshot_at(&record, date);
        let d = determine(&e.engine.registry, &record.payer_id, &code, &snapshot, world.into())
            .or_else(|err| fail(CfStatus::NotFound, err))?;
        emit(out, to_json(&d)?)
    })
}

/// CPT code (as `cpt:NNNNN`) for a procedure spec given as JSON.
///
/// # Safety
/// `engine` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_select_cpt(
    engine: *const CfEngine,
    spec_json: *const c_char,
    out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        check_out(out)?;
        let e = live(engine)?;
        let spec: ProcedureSpec = serde_json::from_str(text(spec_json, "spec")?)
            .or_else(|err| fail(CfStatus::Parse, format!("spec: {err}")))?;
        let code = select_cpt(&spec, &e.engine.code_map).or_else(|err| fail(CfStatus::NotFound, err))?;
        emit(out, code.to_string())
    })
}

/// Ranked next-step recommendations, annotated with determinations, as JSON.
///
/// # Safety
/// `engine` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_next_steps(
    engine: *const CfEngine,
    patient_json: *const c_char,
    as_of_date: *const c_char,
    world: CfWorld,
    out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        check_out(out)?;
        let e = live(engine)?;
        let record = patient(text(patient_json, "patient")?)?;
        let date = as_of(&record, optional_text(as_of_date, "as_of")?)?;
        let world = World::from(world);
        let mut orch = Orchestrator::new(e.engine.clone(), record);
        let recs = orch
            .call("host", NAVIGATOR, "next_steps", json!({ "as_of": date, "world": world }))
            .or_else(|err| fail(CfStatus::Internal, err))?;
        emit(out, recs.to_string())
    })
}

/// Canonical text of a criteria expression. Syntax errors return `Parse`
/// with the line and column in the error message.
///
/// # Safety
/// `rule` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_rule_canonicalize(rule: *const c_char, out: *mut *mut c_char) -> CfStatus {
    guard(|| {
        check_out(out)?;
        let parsed = parse_rule(text(rule, "rule")?).or_else(|err| fail(CfStatus::Parse, err))?;
        emit(out, parsed.to_string())
    })
}

/// Runs a scenario document. Asset references must be `bundled:` names or
/// inline documents. Writes the result JSON and the audit export.
///
/// # Safety
/// `scenario_json` must be NUL-terminated; both outs writable.
#[no_mangle]
pub unsafe extern "C" fn cf_run_scenario(
    scenario_json: *const c_char,
    result_out: *mut *mut c_char,
    audit_out: *mut *mut c_char,
) -> CfStatus {
    guard(|| {
        check_out(result_out)?;
        check_out(audit_out)?;
        let scenario = Scenario::parse(text(scenario_json, "scenario")?).or_else(|e| fail(CfStatus::Parse, e))?;
        let result = run_scenario(&scenario, None).or_else(|e| {
            let status = if matches!(e, ScenarioError::Invalid(_)) { CfStatus::Validation } else { CfStatus::Parse };
            fail(status, e)
        })?;
        emit(result_out, result.to_json())?;
        if let Err(f) = emit(audit_out, result.audit_export()) {
            cf_string_free(*result_out);
            *result_out = ptr::null_mut();
            return Err(f);
        }
        Ok(())
    })
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn cf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
