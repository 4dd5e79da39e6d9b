//! C ABI over the teacher client, the CMA-ES optimizer and prompt combination.
//!
//! Every function returns a [`GdfoStatus`]. On failure the message is kept in
//! thread-local storage and read back with [`gdfo_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use gdfo::blackbox::{BlackBox, TeacherService};
use gdfo::checkpoint::Checkpoint;
use gdfo::cmaes::CmaState;
use gdfo::models::ModelParams;
use gdfo::promptspace::{combine, ProjectionMatrix, PromptRole, PromptVector};
use gdfo::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdfoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    BufferTooSmall = 4,
    Budget = 5,
    Protocol = 6,
    Io = 7,
    Checkpoint = 8,
    Numeric = 9,
    Contract = 10,
    Panic = 11,
}

/// Client for a teacher, either loaded in process or reached over TCP.
pub struct GdfoBlackBox {
    inner: BlackBox,
}

/// CMA-ES optimizer state.
pub struct GdfoCma {
    inner: CmaState,
    pending: Vec<Vec<f64>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GdfoStatus {
    match e {
        Error::Dimension { .. } => GdfoStatus::Dimension,
        Error::Budget { .. } => GdfoStatus::Budget,
        Error::Protocol(_) | Error::Service(_) => GdfoStatus::Protocol,
        Error::Io(_) | Error::Csv(_) => GdfoStatus::Io,
        Error::Checkpoint(_) | Error::Integrity(_) => GdfoStatus::Checkpoint,
        Error::Numeric(_) => GdfoStatus::Numeric,
        Error::Contract(_) => GdfoStatus::Contract,
        _ => GdfoStatus::InvalidArgument,
    }
}

fn fail(status: GdfoStatus, msg: impl Into<String>) -> GdfoStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics to a status code.
fn guard(f: impl FnOnce() -> Result<(), GdfoStatus>) -> GdfoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GdfoStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(GdfoStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, GdfoStatus>;
}

impl<T> OrStatus<T> for gdfo::Result<T> {
    fn or_status(self) -> Result<T, GdfoStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), GdfoStatus> {
    if p.is_null() {
        Err(fail(GdfoStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], GdfoStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string(p: *const c_char, name: &str) -> Result<String, GdfoStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| fail(GdfoStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gdfo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gdfo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a teacher checkpoint and serves it in process with `budget` calls.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gdfo_blackbox_open_checkpoint(
    path: *const c_char,
    budget: u64,
    out: *mut *mut GdfoBlackBox,
) -> GdfoStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = string(path, "path")?;
        let teacher = ModelParams::from_checkpoint(&Checkpoint::load(path).or_status()?).or_status()?;
        let inner = BlackBox::local(Arc::new(TeacherService::new(teacher, budget)));
        *out = Box::into_raw(Box::new(GdfoBlackBox { inner }));
        Ok(())
    })
}

/// Connects to a teacher service at `endpoint` (`host:port`).
///
/// # Safety
/// `endpoint` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gdfo_blackbox_connect(endpoint: *const c_char, out: *mut *mut GdfoBlackBox) -> GdfoStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = BlackBox::connect(&string(endpoint, "endpoint")?).or_status()?;
        *out = Box::into_raw(Box::new(GdfoBlackBox { inner }));
        Ok(())
    })
}

/// Queries one instance. Writes the class logits to `logits` and their count
/// to `n_logits`. Costs one metered call on success.
///
/// # Safety
/// `handle` must come from a `gdfo_blackbox_*` constructor. Buffers must hold
/// at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn gdfo_blackbox_query(
    handle: *const GdfoBlackBox,
    prompt: *const f64,
    prompt_len: usize,
    token_ids: *const u32,
    n_tokens: usize,
    logits: *mut f64,
    capacity: usize,
    n_logits: *mut usize,
) -> GdfoStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(n_logits, "n_logits")?;
        let prompt = slice(prompt, prompt_len, "prompt")?;
        let tokens = slice(token_ids, n_tokens, "token_ids")?;
        let out = (*handle).inner.query_one(prompt, tokens).or_status()?;
        *n_logits = out.len();
        if out.len() > capacity {
            return Err(fail(GdfoStatus::BufferTooSmall, format!("{} logits, capacity {capacity}", out.len())));
        }
        non_null(logits, "logits")?;
        ptr::copy_nonoverlapping(out.as_ptr(), logits, out.len());
        Ok(())
    })
}

/// Calls counted by the service so far.
///
/// # Safety
/// `handle` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gdfo_blackbox_calls_used(handle: *const GdfoBlackBox, out: *mut u64) -> GdfoStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(out, "out")?;
        *out = (*handle).inner.status().or_status()?.calls_used;
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn gdfo_blackbox_free(handle: *mut GdfoBlackBox) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Creates an optimizer over `dim` coordinates starting at the origin.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdfo_cma_new(
    dim: usize,
    sigma0: f64,
    population_size: usize,
    seed: u64,
    out: *mut *mut GdfoCma,
) -> GdfoStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = CmaState::new(dim, sigma0, population_size, seed).or_status()?;
        *out = Box::into_raw(Box::new(GdfoCma { inner, pending: Vec::new() }));
        Ok(())
    })
}

/// Samples a population into `candidates`, row-major `population_size x dim`.
///
/// # Safety
/// `handle` must be live; `candidates` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn gdfo_cma_ask(handle: *mut GdfoCma, candidates: *mut f64, capacity: usize) -> GdfoStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let h = &mut *handle;
        let need = h.inner.population_size() * h.inner.dim();
        if capacity < need {
            return Err(fail(GdfoStatus::BufferTooSmall, format!("need {need} doubles, capacity {capacity}")));
        }
        non_null(candidates, "candidates")?;
        let xs = h.inner.ask().or_status()?;
        for (i, x) in xs.iter().enumerate() {
            ptr::copy_nonoverlapping(x.as_ptr(), candidates.add(i * x.len()), x.len());
        }
        h.pending = xs;
        Ok(())
    })
}

/// Updates the distribution with one fitness per candidate of the last ask.
///
/// # Safety
/// `handle` must be live; `fitnesses` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gdfo_cma_tell(handle: *mut GdfoCma, fitnesses: *const f64, n: usize) -> GdfoStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let h = &mut *handle;
        let f = slice(fitnesses, n, "fitnesses")?;
        h.inner.tell(&h.pending, f).or_status()?;
        h.pending.clear();
        Ok(())
    })
}

/// Copies the current mean into `mean`.
///
/// # Safety
/// `handle` must be live; `mean` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn gdfo_cma_mean(handle: *const GdfoCma, mean: *mut f64, capacity: usize) -> GdfoStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let m = (*handle).inner.mean();
        if capacity < m.len() {
            return Err(fail(GdfoStatus::BufferTooSmall, format!("need {} doubles, capacity {capacity}", m.len())));
        }
        non_null(mean, "mean")?;
        ptr::copy_nonoverlapping(m.as_ptr(), mean, m.len());
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn gdfo_cma_free(handle: *mut GdfoCma) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Writes `alpha * p_gd + (1 - alpha) * (p0 + A z)` to `out`, where `A` is
/// the `prompt_dim x subspace_dim` projection drawn from `projection_seed`.
/// A non-positive `projection_std` selects the default scale.
///
/// # Safety
/// `p_gd`, `p0` and `out` must hold `prompt_dim` doubles; `z` must hold
/// `subspace_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn gdfo_combine(
    p_gd: *const f64,
    p0: *const f64,
    prompt_dim: usize,
    z: *const f64,
    subspace_dim: usize,
    projection_seed: u64,
    projection_std: f64,
    alpha: f64,
    out: *mut f64,
) -> GdfoStatus {
    guard(|| {
        let g = PromptVector::new(slice(p_gd, prompt_dim, "p_gd")?.to_vec(), PromptRole::Generated).or_status()?;
        let p0 = PromptVector::new(slice(p0, prompt_dim, "p0")?.to_vec(), PromptRole::Initial).or_status()?;
        let z = slice(z, subspace_dim, "z")?;
        let std = (projection_std > 0.0).then_some(projection_std);
        let a = ProjectionMatrix::new(prompt_dim, subspace_dim, std, projection_seed).or_status()?;
        let p = combine(&g, &p0, &a, z, alpha).or_status()?;
        non_null(out, "out")?;
        ptr::copy_nonoverlapping(p.values().as_ptr(), out, prompt_dim);
        Ok(())
    })
}
