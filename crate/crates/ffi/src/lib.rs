//! C interface to the dispatcher.
//!
//! A host serving stack opens a table once per model from a workspace written
//! by the `ramp` CLI, then calls `ramp_select` with each step's per-expert
//! counts. Every entry point returns a `RampStatus`; on failure the message is
//! available from `ramp_last_error` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ramp_core::cli::WorkspaceLayout;
use ramp_core::cost_model::CoefficientStore;
use ramp_core::model_catalog::{bundled_catalog, find_model, load_catalog};
use ramp_core::{
    classify_regime, grid_size, region_variables, select_config, ConfigPool, DispatchTable, Error, ExpertHistogram,
    MoeGeometry, StepCache,
};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RampStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Invalid = 5,
    UnknownModel = 6,
    MissingArtifact = 7,
    HistogramLength = 8,
    EmptyTable = 9,
    Internal = 10,
}

impl From<&Error> for RampStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => RampStatus::Io,
            Error::Json { .. } | Error::Schema { .. } => RampStatus::Parse,
            Error::UnknownModel { .. } => RampStatus::UnknownModel,
            Error::MissingArtifact(_) => RampStatus::MissingArtifact,
            Error::HistogramLength { .. } => RampStatus::HistogramLength,
            Error::EmptyTable | Error::EmptyPool => RampStatus::EmptyTable,
            _ => RampStatus::Invalid,
        }
    }
}

/// Region classification of a geometry.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RampRegion {
    pub rho: f64,
    pub lambda: u64,
    pub kappa: f64,
    /// 0 for the pipeline-dominated regime, 1 for compute-scaling.
    pub regime_b: bool,
    pub group_m_required: bool,
    pub split_k_eligible: bool,
}

/// A dispatch decision.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RampSelection {
    pub config_id: u32,
    pub bm: u32,
    pub bn: u32,
    pub wn: u32,
    pub stg: u32,
    pub ttn: u32,
    pub group_m: bool,
    pub split_k: u32,
    pub predicted_us: f64,
    pub grid: u64,
}

/// Opaque per-model dispatch state: coefficient table plus step cache.
/// Not safe for concurrent use; open one per serving stream.
pub struct RampTable {
    table: DispatchTable,
    cache: StepCache,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: RampStatus, message: impl Into<String>) -> RampStatus {
    set_error(message.into());
    status
}

fn from_error(e: Error) -> RampStatus {
    let status = RampStatus::from(&e);
    fail(status, e.to_string())
}

/// Runs `f`, converting panics into `Internal`.
fn guarded(f: impl FnOnce() -> RampStatus) -> RampStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(RampStatus::Internal, "internal panic"),
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, RampStatus> {
    if s.is_null() {
        return Err(fail(RampStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(RampStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn open_table(workspace: &str, model: &str, catalog: Option<&str>) -> Result<RampTable, Error> {
    let catalog = match catalog {
        Some(p) => load_catalog(Path::new(p))?,
        None => bundled_catalog(),
    };
    let geom: MoeGeometry = find_model(&catalog, model)?.clone();
    let layout = WorkspaceLayout::new(workspace, &geom.name);
    let pool_path = layout.pool();
    let text = std::fs::read_to_string(WorkspaceLayout::require(&pool_path)?)
        .map_err(|e| Error::Io { path: pool_path.clone(), source: e })?;
    let pool = ConfigPool::from_json(&text, &pool_path.display().to_string())?;
    let store = CoefficientStore::load(WorkspaceLayout::require(&layout.coeffs())?)?;
    let table = DispatchTable::new(&geom, pool, store.coefficients(), store.sm_count)?;
    Ok(RampTable { table, cache: StepCache::new() })
}

/// Opens the dispatch table for `model` from a CLI workspace directory.
/// `catalog` may be null to use the bundled model catalog. On success
/// `*out` owns a table that must be released with `ramp_table_free`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ramp_table_open(
    workspace: *const c_char,
    model: *const c_char,
    catalog: *const c_char,
    out: *mut *mut RampTable,
) -> RampStatus {
    guarded(|| {
        if out.is_null() {
            return fail(RampStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let (workspace, model) = match (str_arg(workspace, "workspace"), str_arg(model, "model")) {
            (Ok(w), Ok(m)) => (w, m),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let catalog = if catalog.is_null() {
            None
        } else {
            match str_arg(catalog, "catalog") {
                Ok(c) => Some(c),
                Err(s) => return s,
            }
        };
        match open_table(workspace, model, catalog) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(t));
                RampStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a table. Null is ignored.
///
/// # Safety
/// `table` must come from `ramp_table_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ramp_table_free(table: *mut RampTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Number of experts the table expects in each histogram; 0 for null.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramp_table_experts(table: *const RampTable) -> u32 {
    table.as_ref().map_or(0, |t| t.table.geom.experts)
}

/// Number of configurations in the table's pool; 0 for null.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramp_table_configs(table: *const RampTable) -> u64 {
    table.as_ref().map_or(0, |t| t.table.pool.len() as u64)
}

/// Cost-model evaluations performed so far; repeated selections at the same
/// token count within a step do not add to it.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramp_table_evaluations(table: *const RampTable) -> u64 {
    table.as_ref().map_or(0, |t| t.table.evaluations())
}

/// Selects a configuration for one step's per-expert assignment counts.
/// Selections are cached by total count until `step_id` changes.
///
/// # Safety
/// `table` must be a live handle, `counts` must point to `len` values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ramp_select(
    table: *mut RampTable,
    counts: *const u64,
    len: usize,
    step_id: u64,
    out: *mut RampSelection,
) -> RampStatus {
    guarded(|| {
        let Some(t) = table.as_mut() else { return fail(RampStatus::NullArgument, "table is null") };
        if out.is_null() || (counts.is_null() && len > 0) {
            return fail(RampStatus::NullArgument, "counts or out is null");
        }
        let counts = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(counts, len).to_vec() };
        let hist = match ExpertHistogram::new(counts) {
            Ok(h) => h,
            Err(e) => return from_error(e),
        };
        let id = match select_config(&t.table, &hist, &mut t.cache, step_id) {
            Ok(id) => id,
            Err(e) => return from_error(e),
        };
        let c = t.table.pool.get(id).expect("selected id is in the pool");
        let grid = grid_size(c, &hist, &t.table.geom);
        let predicted_us = t.table.coefficients(id).map_or(f64::NAN, |k| k.predict(grid, t.table.sm_count));
        *out = RampSelection {
            config_id: id as u32,
            bm: c.bm,
            bn: c.bn,
            wn: c.wn,
            stg: c.stg,
            ttn: c.ttn,
            group_m: c.group_m,
            split_k: c.split_k,
            predicted_us,
            grid,
        };
        RampStatus::Ok
    })
}

/// Region variables and regime for an `n x k` expert weight matrix.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ramp_classify(n: u64, k: u64, out: *mut RampRegion) -> RampStatus {
    guarded(|| {
        if out.is_null() {
            return fail(RampStatus::NullArgument, "out is null");
        }
        let geom = match MoeGeometry::new("ffi", 1, n, k, 1) {
            Ok(g) => g,
            Err(e) => return from_error(e),
        };
        let vars = region_variables(&geom);
        let report = classify_regime(&vars);
        *out = RampRegion {
            rho: vars.rho.to_f64(),
            lambda: vars.lambda,
            kappa: vars.kappa.to_f64(),
            regime_b: report.regime == ramp_core::model_catalog::Regime::B,
            group_m_required: report.group_m_required,
            split_k_eligible: report.split_k_eligible,
        };
        RampStatus::Ok
    })
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `cap > 0`) and returns the full message length, or 0
/// when there is no error.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ramp_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}
