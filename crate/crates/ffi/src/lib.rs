//! C ABI over the `noesis` core.
//!
//! Every entry point returns a [`NoeStatus`]; outputs go through caller-owned
//! pointers. On failure the message is kept per thread and can be read with
//! [`noe_last_error`]. Checkpoints are opaque handles released with
//! [`noe_checkpoint_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use noesis::attack::{auc, roc_curve, tpr_at_fpr};
use noesis::checkpoint::{self, Checkpoint};
use noesis::privacy::calibrate;
use noesis::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DomainOutOfRange = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded checkpoint.
pub struct NoeCheckpoint {
    inner: Checkpoint,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoeModelInfo {
    pub vocab_size: usize,
    pub context_length: usize,
    pub num_domains: usize,
    pub n_pt: usize,
    pub has_prompts: bool,
    pub has_experts: bool,
    /// -1 unless the checkpoint was exported for one domain.
    pub deployed_domain: i64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoeCalibration {
    pub epsilon: f64,
    pub delta: f64,
    pub q: f64,
    pub steps: u64,
    pub sigma: f64,
    pub minimizing_order: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NoeStatus {
    match e {
        Error::Domain { .. } => NoeStatus::DomainOutOfRange,
        Error::Io { .. } => NoeStatus::Io,
        Error::Format(_) | Error::Json(_) => NoeStatus::Format,
        Error::Calibration(_) | Error::Diverged { .. } | Error::NonFiniteGradient { .. } | Error::Undefined(_) => {
            NoeStatus::Numeric
        }
        _ => NoeStatus::InvalidArgument,
    }
}

struct Fail(NoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NoeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NoeStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            NoeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NoeStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn handle<'a>(h: *const NoeCheckpoint) -> Result<&'a Checkpoint, Fail> {
    h.as_ref().map(|c| &c.inner).ok_or_else(|| null("checkpoint"))
}

/// Library and checkpoint-format version, NUL-terminated, static storage.
#[no_mangle]
pub extern "C" fn noe_version() -> *const c_char {
    const V: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format 1)\0");
    V.as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// including the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn noe_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn noe_checkpoint_load(path: *const c_char, out: *mut *mut NoeCheckpoint) -> NoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let inner = checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(NoeCheckpoint { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `h` must come from [`noe_checkpoint_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn noe_checkpoint_free(h: *mut NoeCheckpoint) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn noe_checkpoint_info(h: *const NoeCheckpoint, out: *mut NoeModelInfo) -> NoeStatus {
    guard(|| {
        let c = handle(h)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = &c.model.config;
        *out = NoeModelInfo {
            vocab_size: cfg.vocab_size,
            context_length: cfg.context_length,
            num_domains: cfg.num_domains,
            n_pt: cfg.n_pt,
            has_prompts: c.model.prompts.is_some(),
            has_experts: c.model.experts.as_ref().is_some_and(|e| e.has_experts()),
            deployed_domain: c.meta.deployed_domain.map_or(-1, |d| d as i64),
        };
        Ok(())
    })
}

/// Teacher-forced mean next-token log-likelihood of `tokens` routed to
/// `domain`. At least two tokens are required.
///
/// # Safety
/// `tokens` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn noe_log_likelihood(
    h: *const NoeCheckpoint,
    domain: usize,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
) -> NoeStatus {
    guard(|| {
        let c = handle(h)?;
        let tokens = slice_arg(tokens, n, "tokens")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = c.model.sequence_log_likelihood(domain, tokens)?;
        Ok(())
    })
}

/// Argmax next-token predictions for positions 2..=n, `n - 1` values
/// written to `preds`, which must hold at least that many.
///
/// # Safety
/// `tokens` must point to `n` values and `preds` to `cap` writable values.
#[no_mangle]
pub unsafe extern "C" fn noe_predict(
    h: *const NoeCheckpoint,
    domain: usize,
    tokens: *const u32,
    n: usize,
    preds: *mut u32,
    cap: usize,
) -> NoeStatus {
    guard(|| {
        let c = handle(h)?;
        let tokens = slice_arg(tokens, n, "tokens")?;
        let p = c.model.predictions(domain, tokens)?;
        if cap < p.len() {
            return Err(Fail(
                NoeStatus::BufferTooSmall,
                format!("need {} prediction slots, got {cap}", p.len()),
            ));
        }
        if preds.is_null() {
            return Err(null("preds"));
        }
        ptr::copy_nonoverlapping(p.as_ptr(), preds, p.len());
        Ok(())
    })
}

/// Writes the single-domain deployable form of `h` to `path`.
///
/// # Safety
/// `h` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn noe_checkpoint_export(h: *const NoeCheckpoint, domain: usize, path: *const c_char) -> NoeStatus {
    guard(|| {
        let c = handle(h)?;
        let path = path_arg(path, "path")?;
        let d = c.deploy(domain)?;
        checkpoint::save(&path, &d.meta, &d.model)?;
        Ok(())
    })
}

/// Smallest noise multiplier meeting (ε, δ) after `steps` steps at
/// sampling rate `batch / dataset_size`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn noe_calibrate(
    epsilon: f64,
    delta: f64,
    batch: usize,
    dataset_size: usize,
    steps: u64,
    out: *mut NoeCalibration,
) -> NoeStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = calibrate(epsilon, delta, batch, dataset_size, steps)?;
        *out = NoeCalibration {
            epsilon: r.epsilon,
            delta: r.delta,
            q: r.q,
            steps: r.steps,
            sigma: r.sigma,
            minimizing_order: r.minimizing_order,
        };
        Ok(())
    })
}

/// ROC AUC and TPR at 1% FPR of a threshold attack where higher scores
/// mean "member". Either output pointer may be null.
///
/// # Safety
/// Score pointers must point to the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn noe_attack_metrics(
    members: *const f64,
    n_members: usize,
    nonmembers: *const f64,
    n_nonmembers: usize,
    out_auc: *mut f64,
    out_tpr_at_1: *mut f64,
) -> NoeStatus {
    guard(|| {
        let m = slice_arg(members, n_members, "members")?;
        let nm = slice_arg(nonmembers, n_nonmembers, "nonmembers")?;
        let curve = roc_curve(m, nm)?;
        if let Some(o) = out_auc.as_mut() {
            *o = auc(&curve);
        }
        if let Some(o) = out_tpr_at_1.as_mut() {
            *o = tpr_at_fpr(&curve, 0.01)?;
        }
        Ok(())
    })
}
