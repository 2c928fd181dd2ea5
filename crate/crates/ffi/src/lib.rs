//! C interface to the flowse enhancer.
//!
//! A model is loaded from a checkpoint into an opaque handle, then used to
//! enhance mono float buffers. Every call returns a `FlowseStatus`; on
//! failure `flowse_last_error_message` describes the most recent error on
//! the calling thread. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use flowse::dsp::Waveform;
use flowse::sampler::{Enhancer, Scheme, SolverConfig};
use flowse::training::{load_checkpoint, Checkpoint};
use flowse::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowseStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Text argument was not valid UTF-8.
    InvalidUtf8 = 2,
    Io = 3,
    Config = 4,
    Domain = 5,
    /// Malformed or incompatible checkpoint or audio.
    Format = 6,
    Divergence = 7,
    /// A Rust panic was caught; the handle should not be reused.
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowseScheme {
    Euler = 0,
    Midpoint = 1,
}

/// Sampling options. Fill with `flowse_enhance_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FlowseEnhanceOptions {
    pub seed: u64,
    /// ODE steps; 0 keeps the value stored in the checkpoint.
    pub n_steps: u32,
    pub scheme: FlowseScheme,
    /// Griffin-Lim iterations.
    pub gl_iters: u32,
}

/// Opaque model handle.
pub struct FlowseModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FlowseStatus {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Rejected(_) => FlowseStatus::Io,
        Error::Config(_) => FlowseStatus::Config,
        Error::Domain(_) => FlowseStatus::Domain,
        Error::Format { .. } | Error::ShapeMismatch { .. } | Error::Wav(_) => FlowseStatus::Format,
        Error::Divergence { .. } => FlowseStatus::Divergence,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guarded(f: impl FnOnce() -> Result<(), (FlowseStatus, String)>) -> FlowseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlowseStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FlowseStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (FlowseStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FlowseStatus, String) {
    (FlowseStatus::NullArgument, format!("{what} is null"))
}

/// Message for the last failure on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn flowse_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn flowse_enhance_options_default() -> FlowseEnhanceOptions {
    FlowseEnhanceOptions {
        seed: 0,
        n_steps: 0,
        scheme: FlowseScheme::Euler,
        gl_iters: 32,
    }
}

/// Loads a checkpoint. On success `*out` owns a handle to release with
/// `flowse_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn flowse_model_load(path: *const c_char, out: *mut *mut FlowseModel) -> FlowseStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| (FlowseStatus::InvalidUtf8, format!("path: {e}")))?;
        let ckpt = load_checkpoint(path).map_err(core_err)?;
        *out = Box::into_raw(Box::new(FlowseModel { ckpt }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from `flowse_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn flowse_model_free(model: *mut FlowseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sample rate the model expects, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flowse_model_sample_rate(model: *const FlowseModel) -> u32 {
    model.as_ref().map_or(0, |m| m.ckpt.mel.sample_rate)
}

/// Enhances `len` mono samples at `sample_rate` into `out`, which must hold
/// `len` floats. `text` may be NULL for text-free enhancement; `options`
/// may be NULL for defaults.
///
/// # Safety
/// `samples` and `out` must point to `len` floats; `text` must be NULL or
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn flowse_enhance(
    model: *const FlowseModel,
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    text: *const c_char,
    options: *const FlowseEnhanceOptions,
    out: *mut f32,
) -> FlowseStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if samples.is_null() {
            return Err(null("samples"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = if text.is_null() {
            None
        } else {
            Some(
                CStr::from_ptr(text)
                    .to_str()
                    .map_err(|e| (FlowseStatus::InvalidUtf8, format!("text: {e}")))?,
            )
        };
        let opts = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| flowse_enhance_options_default());
        let ckpt = &model.ckpt;
        let solver = SolverConfig {
            scheme: match opts.scheme {
                FlowseScheme::Euler => Scheme::Euler,
                FlowseScheme::Midpoint => Scheme::Midpoint,
            },
            n_steps: if opts.n_steps == 0 {
                ckpt.solver.n_steps
            } else {
                opts.n_steps as usize
            },
            seed: opts.seed,
        };
        let input = std::slice::from_raw_parts(samples, len).to_vec();
        let noisy = Waveform::new(input, sample_rate).map_err(core_err)?;
        let enhancer = Enhancer {
            params: &ckpt.params,
            cfg: &ckpt.model,
            mel_cfg: &ckpt.mel,
            solver,
            gl_iters: opts.gl_iters as usize,
            gl_momentum: flowse::dsp::DEFAULT_GL_MOMENTUM,
        };
        let clean = enhancer.enhance(&noisy, text).map_err(core_err)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&clean.samples);
        Ok(())
    })
}
