//! C ABI over the monitoring library.
//!
//! Every fallible function returns a [`DsStatus`]. On anything other than
//! `DS_STATUS_OK` a message is available from [`ds_last_error`] on the same
//! thread until the next failing call. Registries are opaque handles owned by
//! the caller and released with [`ds_registry_free`]. Panics never cross the
//! boundary; they surface as `DS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use digitalshadow::analytics::{self, ChangeTestConfig, Direction};
use digitalshadow::identity::{FaceEmbedding, FaceRegistry};
use digitalshadow::pipeline::{run_pipeline, PipelineConfig};
use digitalshadow::{scoring, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotFound = 4,
    Io = 5,
    Parse = 6,
    Undefined = 7,
    Transport = 8,
    BufferTooSmall = 9,
    Internal = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsDirection {
    Up = 0,
    Down = 1,
    None = 2,
}

/// Opaque identity registry.
pub struct DsRegistry {
    inner: FaceRegistry,
}

/// Result of a nearest-identity lookup. The label is written to the caller's
/// buffer; `label_len` excludes the terminating NUL.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DsMatch {
    pub found: bool,
    pub accepted: bool,
    pub distance: f64,
    pub label_len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsChangeVerdict {
    pub direction: DsDirection,
    pub p_value: f64,
    pub kl: f64,
    pub effect_size: f64,
    pub u_statistic: f64,
    pub small_sample: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DsRunSummary {
    pub frames_processed: u64,
    pub frames_failed: u64,
    pub faces_detected: u64,
    pub faces_matched: u64,
    pub faces_discarded: u64,
    pub samples_stored: u64,
    pub verdicts_emitted: u64,
    pub reports_written: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(DsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DsStatus::Io,
            Error::ManifestParse { .. } | Error::Json(_) | Error::Csv(_) => DsStatus::Parse,
            Error::DimensionMismatch { .. } => DsStatus::DimensionMismatch,
            Error::NotFound(_) => DsStatus::NotFound,
            Error::Undefined(_) => DsStatus::Undefined,
            Error::Transport(_) | Error::Protocol(_) => DsStatus::Transport,
            Error::Config(_)
            | Error::LengthMismatch { .. }
            | Error::OutOfRange(_)
            | Error::InvalidInput(_)
            | Error::Template(_) => DsStatus::InvalidArgument,
            _ => DsStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: DsStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DsStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(DsStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn string<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(fail(DsStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(DsStatus::InvalidArgument, &format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(DsStatus::NullPointer, &format!("{what} is null")))
}

unsafe fn registry<'a>(r: *const DsRegistry) -> Result<&'a DsRegistry, Failure> {
    r.as_ref().ok_or_else(|| fail(DsStatus::NullPointer, "registry is null"))
}

/// Message for the most recent failure on this thread. Empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out_registry` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_new(dimension: usize, out_registry: *mut *mut DsRegistry) -> DsStatus {
    guard(|| {
        let slot = out(out_registry, "out_registry")?;
        if dimension == 0 {
            return Err(fail(DsStatus::InvalidArgument, "dimension must be positive"));
        }
        *slot = Box::into_raw(Box::new(DsRegistry {
            inner: FaceRegistry::new(dimension),
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out_registry` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_load(path: *const c_char, out_registry: *mut *mut DsRegistry) -> DsStatus {
    guard(|| {
        let path = string(path, "path")?;
        let slot = out(out_registry, "out_registry")?;
        let inner = FaceRegistry::load(Path::new(path))?;
        *slot = Box::into_raw(Box::new(DsRegistry { inner }));
        Ok(())
    })
}

/// # Safety
/// `registry` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_save(registry_ptr: *const DsRegistry, path: *const c_char) -> DsStatus {
    guard(|| {
        let r = registry(registry_ptr)?;
        r.inner.save(Path::new(string(path, "path")?))?;
        Ok(())
    })
}

/// Release a registry. Null is ignored.
///
/// # Safety
/// `registry` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_free(registry_ptr: *mut DsRegistry) {
    if !registry_ptr.is_null() {
        drop(Box::from_raw(registry_ptr));
    }
}

/// Number of distinct labels. Zero for a null handle.
///
/// # Safety
/// `registry` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_len(registry_ptr: *const DsRegistry) -> usize {
    registry_ptr.as_ref().map_or(0, |r| r.inner.len())
}

/// Add one template under `label`. The embedding is stored as given; callers
/// that compare unit embeddings should normalize first.
///
/// # Safety
/// `embedding` must point to `len` doubles; `label` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_add(
    registry_ptr: *mut DsRegistry,
    label: *const c_char,
    embedding: *const f64,
    len: usize,
) -> DsStatus {
    guard(|| {
        let r = registry_ptr
            .as_mut()
            .ok_or_else(|| fail(DsStatus::NullPointer, "registry is null"))?;
        let label = string(label, "label")?;
        let v = slice(embedding, len, "embedding")?;
        r.inner.register_face(&FaceEmbedding::new(v.to_vec()), label)?;
        Ok(())
    })
}

/// Nearest identity for `probe` under acceptance radius `tau`.
///
/// On an empty registry `found` is false. Otherwise the label is copied into
/// `label_buf` (NUL-terminated) when `label_cap` is large enough; if not, the
/// call returns `DS_STATUS_BUFFER_TOO_SMALL` with `label_len` set so the
/// caller can retry. `label_buf` may be null when `label_cap` is zero.
///
/// # Safety
/// `probe` must point to `len` doubles, `out_match` must be valid for writes
/// and `label_buf` valid for `label_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_registry_match(
    registry_ptr: *const DsRegistry,
    probe: *const f64,
    len: usize,
    tau: f64,
    out_match: *mut DsMatch,
    label_buf: *mut c_char,
    label_cap: usize,
) -> DsStatus {
    guard(|| {
        let r = registry(registry_ptr)?;
        let v = slice(probe, len, "probe")?;
        let slot = out(out_match, "out_match")?;
        *slot = DsMatch::default();
        let Some(m) = r.inner.match_identity(&FaceEmbedding::new(v.to_vec()), tau)? else {
            return Ok(());
        };
        *slot = DsMatch {
            found: true,
            accepted: m.accepted,
            distance: m.distance,
            label_len: m.label.len(),
        };
        if label_cap < m.label.len() + 1 || label_buf.is_null() {
            return Err(fail(
                DsStatus::BufferTooSmall,
                &format!("label needs {} bytes", m.label.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(m.label.as_ptr(), label_buf.cast::<u8>(), m.label.len());
        *label_buf.add(m.label.len()) = 0;
        Ok(())
    })
}

/// ROC-AUC with ties counted one half. `labels` holds 0 or 1 per score.
///
/// # Safety
/// `scores` and `labels` must each point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn ds_roc_auc(scores: *const f64, labels: *const u8, n: usize, out_auc: *mut f64) -> DsStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l = slice(labels, n, "labels")?;
        if let Some(bad) = l.iter().find(|&&y| y > 1) {
            return Err(fail(DsStatus::InvalidArgument, &format!("label {bad} is not 0 or 1")));
        }
        let l: Vec<bool> = l.iter().map(|&y| y == 1).collect();
        *out(out_auc, "out_auc")? = scoring::roc_auc(s, &l)?;
        Ok(())
    })
}

/// `D(p || q)` in nats with `epsilon` smoothing.
///
/// # Safety
/// `p` and `q` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_kl_divergence(
    p: *const f64,
    q: *const f64,
    n: usize,
    epsilon: f64,
    out_kl: *mut f64,
) -> DsStatus {
    guard(|| {
        let p = slice(p, n, "p")?;
        let q = slice(q, n, "q")?;
        *out(out_kl, "out_kl")? = analytics::kl_divergence(p, q, epsilon)?;
        Ok(())
    })
}

/// Two-sample change test of `current` against `previous`. Pass `bins` 0 to
/// use the library default.
///
/// # Safety
/// The sample pointers must cover their lengths; `out_verdict` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn ds_change_test(
    previous: *const f64,
    n_previous: usize,
    current: *const f64,
    n_current: usize,
    alpha: f64,
    bins: usize,
    out_verdict: *mut DsChangeVerdict,
) -> DsStatus {
    guard(|| {
        let prev = slice(previous, n_previous, "previous")?;
        let cur = slice(current, n_current, "current")?;
        let defaults = ChangeTestConfig::default();
        let cfg = ChangeTestConfig {
            alpha,
            bins: if bins == 0 { defaults.bins } else { bins },
            ..defaults
        };
        let v = analytics::change_test(prev, cur, &cfg)?;
        *out(out_verdict, "out_verdict")? = DsChangeVerdict {
            direction: match v.direction {
                Direction::Up => DsDirection::Up,
                Direction::Down => DsDirection::Down,
                Direction::None => DsDirection::None,
            },
            p_value: v.p_value,
            kl: v.kl,
            effect_size: v.effect_size,
            u_statistic: v.u_statistic,
            small_sample: v.small_sample,
        };
        Ok(())
    })
}

/// Run the monitoring pipeline described by a JSON config file. Relative
/// paths inside the config resolve against the config's directory.
///
/// # Safety
/// `config_path` must be NUL-terminated; `out_summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn ds_run_pipeline(config_path: *const c_char, out_summary: *mut DsRunSummary) -> DsStatus {
    guard(|| {
        let cfg = PipelineConfig::load(Path::new(string(config_path, "config_path")?))?;
        let s = run_pipeline(&cfg)?;
        if let Some(slot) = out_summary.as_mut() {
            *slot = DsRunSummary {
                frames_processed: s.frames_processed,
                frames_failed: s.frames_failed,
                faces_detected: s.faces_detected,
                faces_matched: s.faces_matched,
                faces_discarded: s.faces_discarded,
                samples_stored: s.samples_stored,
                verdicts_emitted: s.verdicts_emitted,
                reports_written: s.reports_written,
            };
        }
        Ok(())
    })
}
