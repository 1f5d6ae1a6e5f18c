//! C interface to the aimdt library.
//!
//! Objects cross the boundary as opaque handles, released with the matching
//! `*_free`. Every fallible function returns an [`AimdtStatus`]; on failure
//! the message is available from [`aimdt_last_error`] on the same thread.
//! Panics are caught and reported as [`AimdtStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aimdt::datagen::{gen_collision_free, read_dataset, write_dataset, Dataset};
use aimdt::episode::{compute_rtgs, sample_scenario};
use aimdt::eval::{eval_plain, MetricsReport};
use aimdt::model::{fit, load_checkpoint, save_checkpoint, DtModel};
use aimdt::{oracle, Error, RunConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AimdtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    InvalidInput = 4,
    Io = 5,
    Dataset = 6,
    Checkpoint = 7,
    Aborted = 8,
    NonFinite = 9,
    Schedule = 10,
    Path = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for AimdtStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => AimdtStatus::Config,
            Error::Path(_) => AimdtStatus::Path,
            Error::InvalidInput(_) => AimdtStatus::InvalidInput,
            Error::Aborted { .. } => AimdtStatus::Aborted,
            Error::Dataset(_) => AimdtStatus::Dataset,
            Error::Checkpoint(_) => AimdtStatus::Checkpoint,
            Error::NonFinite(_) => AimdtStatus::NonFinite,
            Error::Schedule(_) => AimdtStatus::Schedule,
            Error::Io(_) => AimdtStatus::Io,
        }
    }
}

/// Run configuration handle.
pub struct AimdtConfig(RunConfig);

/// Episode dataset handle.
pub struct AimdtDataset(Dataset);

/// Trained model handle.
pub struct AimdtModel(DtModel);

/// Summary of an evaluation run over every episode.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AimdtMetrics {
    pub n_episodes: usize,
    pub collision_rate: f64,
    pub avg_return: f64,
    pub std_return: f64,
    pub avg_length_s: f64,
    pub std_length_s: f64,
    /// Largest return-to-go bookkeeping error over the rollouts.
    pub max_rtg_error: f64,
}

impl From<&MetricsReport> for AimdtMetrics {
    fn from(r: &MetricsReport) -> Self {
        AimdtMetrics {
            n_episodes: r.pooled.n_episodes,
            collision_rate: r.collision_rate,
            avg_return: r.pooled.avg_return,
            std_return: r.pooled.std_return,
            avg_length_s: r.pooled.avg_length_s,
            std_length_s: r.pooled.std_length_s,
            max_rtg_error: r.max_rtg_error.unwrap_or(0.0),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(AimdtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AimdtStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AimdtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            AimdtStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(AimdtStatus::NullPointer, format!("{what} is null")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(AimdtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(AimdtStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(AimdtStatus::NullPointer, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn aimdt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn aimdt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in default configuration.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_config_default(out: *mut *mut AimdtConfig) -> AimdtStatus {
    guard(|| put(out, AimdtConfig(RunConfig::builtin())))
}

/// Configuration from a TOML document layered over the defaults.
///
/// # Safety
/// `toml` must be a nul-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_config_from_toml(toml: *const c_char, out: *mut *mut AimdtConfig) -> AimdtStatus {
    guard(|| {
        let cfg = RunConfig::layered(&[text(toml, "toml")?], &[])?;
        put(out, AimdtConfig(cfg))
    })
}

/// Apply one `section.key=value` override in place. On failure the
/// configuration is unchanged.
///
/// # Safety
/// `cfg` must be a live handle; `assignment` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aimdt_config_set(cfg: *mut AimdtConfig, assignment: *const c_char) -> AimdtStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| Failure(AimdtStatus::NullPointer, "config is null".into()))?;
        let next = RunConfig::layered(&[&c.0.to_toml()], &[text(assignment, "assignment")?.to_string()])?;
        c.0 = next;
        Ok(())
    })
}

/// Hex digest identifying the configuration, written nul-terminated into
/// `buf`. `buf_len` must be at least 33.
///
/// # Safety
/// `cfg` must be a live handle; `buf` valid for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_config_hash(cfg: *const AimdtConfig, buf: *mut c_char, buf_len: usize) -> AimdtStatus {
    guard(|| {
        let hash = deref(cfg, "config")?.0.hash();
        if buf.is_null() {
            return Err(Failure(AimdtStatus::NullPointer, "buffer is null".into()));
        }
        if buf_len < hash.len() + 1 {
            return Err(Failure(AimdtStatus::BufferTooSmall, format!("need {} bytes", hash.len() + 1)));
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast::<c_char>(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aimdt_config_free(cfg: *mut AimdtConfig) {
    free(cfg)
}

/// Collision-free coordinator episodes, `per_combination` for every ordered
/// assignment of approach arms.
///
/// # Safety
/// `cfg` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_dataset_generate(
    cfg: *const AimdtConfig,
    per_combination: usize,
    seed: u64,
    out: *mut *mut AimdtDataset,
) -> AimdtStatus {
    guard(|| {
        let ds = gen_collision_free(&deref(cfg, "config")?.0, per_combination, seed)?;
        put(out, AimdtDataset(ds))
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_dataset_read(path: *const c_char, out: *mut *mut AimdtDataset) -> AimdtStatus {
    guard(|| {
        let ds = read_dataset(Path::new(text(path, "path")?), None)?;
        put(out, AimdtDataset(ds))
    })
}

/// # Safety
/// `ds` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aimdt_dataset_write(ds: *const AimdtDataset, path: *const c_char) -> AimdtStatus {
    guard(|| Ok(write_dataset(&deref(ds, "dataset")?.0, Path::new(text(path, "path")?))?))
}

/// Number of episodes, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aimdt_dataset_len(ds: *const AimdtDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aimdt_dataset_free(ds: *mut AimdtDataset) {
    free(ds)
}

/// Train a model on `ds` with the model and training sections of `cfg`.
///
/// # Safety
/// `cfg` and `ds` must be live handles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_model_train(
    cfg: *const AimdtConfig,
    ds: *const AimdtDataset,
    out: *mut *mut AimdtModel,
) -> AimdtStatus {
    guard(|| {
        let (model, _) = fit(&deref(cfg, "config")?.0, &deref(ds, "dataset")?.0, |_| {})?;
        put(out, AimdtModel(model))
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_model_load(path: *const c_char, out: *mut *mut AimdtModel) -> AimdtStatus {
    guard(|| {
        let m = load_checkpoint(Path::new(text(path, "path")?))?;
        put(out, AimdtModel(m))
    })
}

/// # Safety
/// `model` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aimdt_model_save(model: *const AimdtModel, path: *const c_char) -> AimdtStatus {
    guard(|| Ok(save_checkpoint(&deref(model, "model")?.0, Path::new(text(path, "path")?))?))
}

/// Mean training return, the default initial return-to-go; NaN for a null
/// handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aimdt_model_return_mean(model: *const AimdtModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.0.norm.return_mean)
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aimdt_model_free(model: *mut AimdtModel) {
    free(model)
}

/// Roll the model out on the configured number of held-out scenarios.
///
/// # Safety
/// `model` and `cfg` must be live handles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_eval_plain(
    model: *const AimdtModel,
    cfg: *const AimdtConfig,
    seed: u64,
    out: *mut AimdtMetrics,
) -> AimdtStatus {
    guard(|| {
        let report = eval_plain(&deref(model, "model")?.0, &deref(cfg, "config")?.0, seed)?;
        let out = out.as_mut().ok_or_else(|| Failure(AimdtStatus::NullPointer, "output pointer is null".into()))?;
        *out = (&report).into();
        Ok(())
    })
}

/// Shortest possible episode length, in seconds, for the random scenario of
/// `n_vehicles` drawn from `seed`.
///
/// # Safety
/// `cfg` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn aimdt_optimal_makespan(
    cfg: *const AimdtConfig,
    n_vehicles: usize,
    seed: u64,
    out: *mut f64,
) -> AimdtStatus {
    guard(|| {
        let env = deref(cfg, "config")?.0.environment()?;
        let scenario = sample_scenario(&env, n_vehicles, seed)?;
        let schedule = oracle::solve(&env, &scenario)?;
        let out = out.as_mut().ok_or_else(|| Failure(AimdtStatus::NullPointer, "output pointer is null".into()))?;
        *out = schedule.makespan;
        Ok(())
    })
}

/// Returns-to-go of `len` rewards, written into `out` (also `len` long).
///
/// # Safety
/// `rewards` and `out` must be valid for `len` elements; they may alias.
#[no_mangle]
pub unsafe extern "C" fn aimdt_compute_rtgs(rewards: *const f64, len: usize, out: *mut f64) -> AimdtStatus {
    guard(|| {
        if len == 0 {
            return Ok(());
        }
        if rewards.is_null() || out.is_null() {
            return Err(Failure(AimdtStatus::NullPointer, "reward or output buffer is null".into()));
        }
        let rtgs = compute_rtgs(std::slice::from_raw_parts(rewards, len))?;
        ptr::copy(rtgs.as_ptr(), out, len);
        Ok(())
    })
}
