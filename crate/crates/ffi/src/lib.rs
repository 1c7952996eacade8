//! C ABI over `selfens`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_load`
//! style functions and released with the matching `*_free`. Fallible calls
//! return a [`SelfensStatus`]; on failure the message is available from
//! [`selfens_last_error`] on the same thread until the next failing call.
//! Strings returned by the library are released with [`selfens_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use selfens::config::RunConfig;
use selfens::consistency::{consistency_mse, cross_entropy_masked, EnsembleState};
use selfens::formats::{ensemble_from_bytes, ensemble_to_bytes, load_ensemble, save_ensemble};
use selfens::history::RunHistory;
use selfens::schedules::{self, Algorithm, ScheduleConfig};
use selfens::trainers::run_config;
use selfens::{Error, Precision, Real, Tensor};

/// Status codes; the non-zero values match the command line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfensStatus {
    Ok = 0,
    /// Null pointer or otherwise unusable argument.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Divergence = 4,
    /// The library panicked; this is a bug.
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(err: Error) -> SelfensStatus {
    set_last_error(err.to_string());
    match err.exit_code() {
        2 => SelfensStatus::Config,
        3 => SelfensStatus::Data,
        4 => SelfensStatus::Divergence,
        _ => SelfensStatus::Internal,
    }
}

fn invalid(msg: &str) -> SelfensStatus {
    set_last_error(msg);
    SelfensStatus::InvalidArgument
}

fn guard(f: impl FnOnce() -> SelfensStatus) -> SelfensStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal error: {msg}"));
            SelfensStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn selfens_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn selfens_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn selfens_rampup(epoch: usize, rampup_epochs: usize) -> f64 {
    schedules::rampup(epoch, rampup_epochs)
}

#[no_mangle]
pub extern "C" fn selfens_rampdown(epoch: usize, total_epochs: usize, rampdown_epochs: usize) -> f64 {
    schedules::rampdown(epoch, total_epochs, rampdown_epochs)
}

/// Learning rate at `epoch` under the default schedule scaled to `lr_max`.
#[no_mangle]
pub extern "C" fn selfens_learning_rate(epoch: usize, total_epochs: usize, lr_max: f64) -> f64 {
    let cfg = ScheduleConfig {
        total_epochs,
        lr_max,
        ..ScheduleConfig::default()
    };
    schedules::learning_rate(epoch, &cfg)
}

/// `w_max * M/N * rampup(epoch)`; `temporal` non-zero forces 0 on epoch 0.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn selfens_unsup_weight(
    epoch: usize,
    rampup_epochs: usize,
    w_max: f64,
    labeled: usize,
    total: usize,
    temporal: bool,
    out: *mut f64,
) -> SelfensStatus {
    guard(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let cfg = ScheduleConfig {
            total_epochs: rampup_epochs.max(1),
            rampup_epochs,
            rampdown_epochs: 0,
            w_max: Some(w_max),
            ..ScheduleConfig::default()
        };
        let algo = if temporal { Algorithm::Temporal } else { Algorithm::Pi };
        match schedules::unsup_weight(epoch, &cfg, labeled, total, algo) {
            Ok(w) => {
                *out = w;
                SelfensStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize) -> Option<Tensor<f64>> {
    if p.is_null() || rows == 0 || cols == 0 {
        return None;
    }
    let data = std::slice::from_raw_parts(p, rows * cols).to_vec();
    Tensor::new(vec![rows, cols], data).ok()
}

/// Mean squared consistency penalty `sum |z - target|^2 / (classes * batch)`.
///
/// # Safety
/// `z` and `target` must hold `batch * classes` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfens_consistency_mse(
    z: *const f64,
    target: *const f64,
    batch: usize,
    classes: usize,
    out: *mut f64,
) -> SelfensStatus {
    guard(|| {
        let (Some(a), Some(b)) = (matrix(z, batch, classes), matrix(target, batch, classes)) else {
            return invalid("null or empty prediction matrix");
        };
        if out.is_null() {
            return invalid("out is null");
        }
        match consistency_mse(&a, &b) {
            Ok(t) => {
                *out = t.value;
                SelfensStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Mean cross-entropy over labeled rows; a negative label marks an
/// unlabeled row.
///
/// # Safety
/// `predictions` must hold `batch * classes` doubles, `labels` `batch`
/// integers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfens_cross_entropy(
    predictions: *const f64,
    labels: *const i32,
    batch: usize,
    classes: usize,
    out: *mut f64,
) -> SelfensStatus {
    guard(|| {
        let Some(p) = matrix(predictions, batch, classes) else {
            return invalid("null or empty prediction matrix");
        };
        if labels.is_null() || out.is_null() {
            return invalid("null pointer argument");
        }
        let labels: Vec<Option<usize>> = std::slice::from_raw_parts(labels, batch)
            .iter()
            .map(|&y| (y >= 0).then_some(y as usize))
            .collect();
        match cross_entropy_masked(&p, &labels) {
            Ok(t) => {
                *out = t.value;
                SelfensStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Temporal-ensemble accumulator `Z` with per-row update counters.
pub struct SelfensEnsemble {
    inner: EnsembleState<f64>,
}

/// # Safety
/// `out` must point to writable storage for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_new(
    rows: usize,
    classes: usize,
    alpha: f64,
    out: *mut *mut SelfensEnsemble,
) -> SelfensStatus {
    guard(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        match EnsembleState::new(rows, classes, alpha) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SelfensEnsemble { inner }));
                SelfensStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `e` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_free(e: *mut SelfensEnsemble) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_rows(e: *const SelfensEnsemble) -> usize {
    e.as_ref().map_or(0, |e| e.inner.rows())
}

/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_classes(e: *const SelfensEnsemble) -> usize {
    e.as_ref().map_or(0, |e| e.inner.classes())
}

/// Update count of one row, or 0 for an invalid handle or row.
///
/// # Safety
/// `e` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_counter(e: *const SelfensEnsemble, row: usize) -> u64 {
    e.as_ref()
        .and_then(|e| e.inner.counters().get(row).copied())
        .unwrap_or(0)
}

/// Applies `Z <- alpha Z + (1 - alpha) z` to `count` rows.
///
/// # Safety
/// `rows` must hold `count` indices and `z` `count * classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_update(
    e: *mut SelfensEnsemble,
    rows: *const usize,
    count: usize,
    z: *const f64,
) -> SelfensStatus {
    guard(|| {
        let Some(e) = e.as_mut() else {
            return invalid("ensemble handle is null");
        };
        if rows.is_null() || count == 0 {
            return invalid("no rows given");
        }
        let Some(z) = matrix(z, count, e.inner.classes()) else {
            return invalid("prediction matrix is null");
        };
        let rows = std::slice::from_raw_parts(rows, count);
        match e.inner.update(rows, &z) {
            Ok(()) => SelfensStatus::Ok,
            Err(err) => fail(err),
        }
    })
}

/// Writes the bias-corrected target of `row` into `out` (`classes` doubles).
/// Fails with `Config` for a row that was never updated.
///
/// # Safety
/// `out` must have room for `classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_target(
    e: *const SelfensEnsemble,
    row: usize,
    out: *mut f64,
) -> SelfensStatus {
    guard(|| {
        let Some(e) = e.as_ref() else {
            return invalid("ensemble handle is null");
        };
        if out.is_null() {
            return invalid("out is null");
        }
        match e.inner.targets(&[row]) {
            Ok(t) => {
                std::slice::from_raw_parts_mut(out, t.len()).copy_from_slice(t.data());
                SelfensStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// # Safety
/// `e` must be a live handle and `path` a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_save(e: *const SelfensEnsemble, path: *const c_char) -> SelfensStatus {
    guard(|| {
        let (Some(e), Some(path)) = (e.as_ref(), str_arg(path)) else {
            return invalid("null handle or path");
        };
        match save_ensemble(&PathBuf::from(path), &e.inner) {
            Ok(()) => SelfensStatus::Ok,
            Err(err) => fail(err),
        }
    })
}

/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfens_ensemble_load(path: *const c_char, out: *mut *mut SelfensEnsemble) -> SelfensStatus {
    guard(|| {
        let Some(path) = str_arg(path) else {
            return invalid("path is null or not UTF-8");
        };
        if out.is_null() {
            return invalid("out is null");
        }
        match load_ensemble::<f64>(&PathBuf::from(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SelfensEnsemble { inner }));
                SelfensStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Validated run configuration.
pub struct SelfensConfig {
    inner: RunConfig,
}

/// Parses a TOML configuration; an empty string gives all defaults.
///
/// # Safety
/// `toml` must be a nul-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn selfens_config_parse(toml: *const c_char, out: *mut *mut SelfensConfig) -> SelfensStatus {
    guard(|| {
        let Some(text) = str_arg(toml) else {
            return invalid("config text is null or not UTF-8");
        };
        if out.is_null() {
            return invalid("out is null");
        }
        match RunConfig::parse(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SelfensConfig { inner }));
                SelfensStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// TOML text of the configuration, released with `selfens_string_free`;
/// null on failure.
///
/// # Safety
/// `c` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn selfens_config_to_toml(c: *const SelfensConfig) -> *mut c_char {
    let Some(c) = c.as_ref() else {
        invalid("config handle is null");
        return ptr::null_mut();
    };
    match c.inner.to_toml() {
        Ok(s) => CString::new(s).map_or(ptr::null_mut(), CString::into_raw),
        Err(e) => {
            fail(e);
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `c` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn selfens_config_free(c: *mut SelfensConfig) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Per-epoch metrics of a finished run.
pub struct SelfensHistory {
    inner: RunHistory,
}

/// One epoch of a [`SelfensHistory`]; error rates are NaN when not measured.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SelfensEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub w: f64,
    pub beta1: f64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wall_time: f64,
    pub forward_passes: u64,
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn selfens_history_len(h: *const SelfensHistory) -> usize {
    h.as_ref().map_or(0, |h| h.inner.records.len())
}

/// # Safety
/// `h` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn selfens_history_get(h: *const SelfensHistory, index: usize, out: *mut SelfensEpoch) -> SelfensStatus {
    guard(|| {
        let (Some(h), false) = (h.as_ref(), out.is_null()) else {
            return invalid("null handle or output");
        };
        let Some(r) = h.inner.records.get(index) else {
            return invalid("epoch index out of range");
        };
        *out = SelfensEpoch {
            epoch: r.epoch,
            lr: r.lr,
            w: r.w,
            beta1: r.beta1,
            sup_loss: r.sup_loss,
            unsup_loss: r.unsup_loss,
            train_err: r.train_err.unwrap_or(f64::NAN),
            test_err: r.test_err.unwrap_or(f64::NAN),
            wall_time: r.wall_time,
            forward_passes: r.forward_passes,
        };
        SelfensStatus::Ok
    })
}

/// # Safety
/// `h` must be a live handle and `path` a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn selfens_history_write_jsonl(h: *const SelfensHistory, path: *const c_char) -> SelfensStatus {
    guard(|| {
        let (Some(h), Some(path)) = (h.as_ref(), str_arg(path)) else {
            return invalid("null handle or path");
        };
        match h.inner.write_jsonl(&PathBuf::from(path)) {
            Ok(()) => SelfensStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `h` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn selfens_history_free(h: *mut SelfensHistory) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

fn widen<R: Real>(state: &EnsembleState<R>) -> Result<EnsembleState<f64>, Error> {
    ensemble_from_bytes(&ensemble_to_bytes(state), "ensemble")
}

/// Trains with the configuration's own seed. `history` receives the run
/// history; `ensemble`, when non-null, receives the final ensemble of a
/// temporal run (null for other algorithms).
///
/// # Safety
/// `c` must be a live handle; `history` must be writable; `ensemble` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn selfens_train(
    c: *const SelfensConfig,
    history: *mut *mut SelfensHistory,
    ensemble: *mut *mut SelfensEnsemble,
) -> SelfensStatus {
    guard(|| {
        let Some(c) = c.as_ref() else {
            return invalid("config handle is null");
        };
        if history.is_null() {
            return invalid("history output is null");
        }
        let cfg = &c.inner;
        let result = match cfg.precision {
            Precision::F32 => run_config::<f32>(cfg, cfg.seed)
                .and_then(|(o, _)| Ok((o.history, o.ensemble.as_ref().map(widen).transpose()?))),
            Precision::F64 => run_config::<f64>(cfg, cfg.seed).map(|(o, _)| (o.history, o.ensemble)),
        };
        match result {
            Ok((h, z)) => {
                *history = Box::into_raw(Box::new(SelfensHistory { inner: h }));
                if !ensemble.is_null() {
                    *ensemble = z.map_or(ptr::null_mut(), |inner| Box::into_raw(Box::new(SelfensEnsemble { inner })));
                }
                SelfensStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
