//! C ABI over the `adattt` core: load a model file, score and adapt single
//! inputs, run Sinkhorn on a cost matrix and evaluate the binary error bounds.
//!
//! Every function returns an [`AdatttStatus`]; on failure a description is
//! available from [`adattt_last_error`] until the next call on the same thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use adattt::bounds::{self, DiscreteJoint};
use adattt::engine::{self, Method, Mode};
use adattt::persist::ModelFile;
use adattt::transport;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdatttStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Model = 5,
    Numeric = 6,
    Panic = 7,
}

/// Test-time method selector, matching the CLI's method names.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdatttMethod {
    Test = 0,
    Ttt = 1,
    PriTtt = 2,
    DynTtt = 3,
    AdaTtt = 4,
}

fn method_from(code: u32) -> Result<Method, Failure> {
    Ok(match code {
        c if c == AdatttMethod::Test as u32 => Method::Test,
        c if c == AdatttMethod::Ttt as u32 => Method::Ttt,
        c if c == AdatttMethod::PriTtt as u32 => Method::PriTtt,
        c if c == AdatttMethod::DynTtt as u32 => Method::DynTtt,
        c if c == AdatttMethod::AdaTtt as u32 => Method::AdaTtt,
        other => return fail(AdatttStatus::InvalidArgument, format!("unknown method code {other}")),
    })
}

/// Opaque handle to a loaded model file.
pub struct AdatttModel {
    file: ModelFile,
}

/// Summary of a Sinkhorn solve; the plan itself goes to a caller buffer.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdatttSinkhornInfo {
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
}

/// Binary error sandwich for one joint table.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdatttBoundReport {
    pub bayes_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(AdatttStatus, String);

type Outcome = Result<(), Failure>;

fn fail<T>(status: AdatttStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome) -> AdatttStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdatttStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            AdatttStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(AdatttStatus::NullPointer, format!("{what} is null"));
    }
    Ok(())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(AdatttStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const AdatttModel) -> Result<&'a AdatttModel, Failure> {
    non_null(m, "model")?;
    Ok(&*m)
}

/// Message for the most recent failure on this thread, or null. The pointer is
/// owned by the library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn adattt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adattt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn install(file: ModelFile, out: *mut *mut AdatttModel) -> Outcome {
    non_null(out, "out")?;
    // SAFETY: `out` checked non-null; the caller provides a writable slot.
    unsafe { *out = Box::into_raw(Box::new(AdatttModel { file })) };
    Ok(())
}

/// Parse a model file from a JSON string. Free the handle with [`adattt_model_free`].
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adattt_model_from_json(json: *const c_char, out: *mut *mut AdatttModel) -> AdatttStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let file = ModelFile::from_json(text).or_else(|e| fail(AdatttStatus::Model, e.to_string()))?;
        install(file, out)
    })
}

/// Load a model file written by `adattt pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn adattt_model_load(path: *const c_char, out: *mut *mut AdatttModel) -> AdatttStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let file = ModelFile::load(Path::new(p)).or_else(|e| {
            let status = match e {
                adattt::persist::PersistError::Io { .. } => AdatttStatus::Io,
                _ => AdatttStatus::Model,
            };
            fail(status, e.to_string())
        })?;
        install(file, out)
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn adattt_model_free(model: *mut AdatttModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the feature vector the model expects.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn adattt_model_input_dim(model: *const AdatttModel) -> usize {
    model.as_ref().map_or(0, |m| m.file.model.arch.input_dim)
}

/// Length of the staleness vector (the gated block).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn adattt_model_gated_dim(model: *const AdatttModel) -> usize {
    model.as_ref().map_or(0, |m| m.file.model.arch.gated_dim)
}

/// Decision threshold stored with the model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn adattt_model_threshold(model: *const AdatttModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.file.threshold)
}

fn checked_inputs(m: &AdatttModel, x: &[f64], dt: &[f64]) -> Result<Vec<f64>, Failure> {
    let arch = &m.file.model.arch;
    if x.len() != arch.input_dim || dt.len() != arch.gated_dim {
        return fail(
            AdatttStatus::InvalidArgument,
            format!(
                "expected {} features and {} staleness values, got {} and {}",
                arch.input_dim,
                arch.gated_dim,
                x.len(),
                dt.len()
            ),
        );
    }
    if x.iter().chain(dt).any(|v| !v.is_finite()) {
        return fail(AdatttStatus::InvalidArgument, "non-finite input");
    }
    Ok(m.file.model.feature_stats.standardize(x))
}

/// Risk score for one derived feature vector (unstandardized) without adaptation.
///
/// # Safety
/// `x` must hold `x_len` values, `dt` `dt_len` values, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adattt_model_predict(
    model: *const AdatttModel,
    x: *const f64,
    x_len: usize,
    dt: *const f64,
    dt_len: usize,
    out: *mut f64,
) -> AdatttStatus {
    guard(|| {
        let m = model_arg(model)?;
        non_null(out, "out")?;
        let xs = checked_inputs(m, slice_arg(x, x_len, "x")?, slice_arg(dt, dt_len, "dt")?)?;
        let dts = slice_arg(dt, dt_len, "dt")?;
        let r = m
            .file
            .model
            .risk(&xs, dts)
            .or_else(|e| fail(AdatttStatus::Numeric, e.to_string()))?;
        *out = r;
        Ok(())
    })
}

/// Adapt to one input and return the adapted score. `method` is an
/// [`AdatttMethod`] value. The handle is left unchanged (reset protocol); the
/// model's stored config supplies everything except the method, step count,
/// step size and seed.
///
/// # Safety
/// `x` must hold `x_len` values, `dt` `dt_len` values, and `out` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn adattt_model_adapt(
    model: *const AdatttModel,
    x: *const f64,
    x_len: usize,
    dt: *const f64,
    dt_len: usize,
    method: u32,
    steps: usize,
    ttt_lr: f64,
    seed: u64,
    out: *mut f64,
) -> AdatttStatus {
    guard(|| {
        let m = model_arg(model)?;
        non_null(out, "out")?;
        let xs = checked_inputs(m, slice_arg(x, x_len, "x")?, slice_arg(dt, dt_len, "dt")?)?;
        let dts = slice_arg(dt, dt_len, "dt")?;
        let cfg = engine::EngineConfig {
            method: method_from(method)?,
            ttt_steps: steps,
            ttt_lr,
            mode: Mode::Reset,
            seed,
            ..m.file.config.clone()
        };
        cfg.validate().or_else(|e| fail(AdatttStatus::InvalidArgument, e.to_string()))?;
        let mut working = m.file.model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = engine::adapt_instance(&mut working, &xs, dts, &cfg, &mut rng)
            .or_else(|e| fail(AdatttStatus::Numeric, e.to_string()))?;
        *out = trace.prediction;
        Ok(())
    })
}

/// Entropic transport between `a` (length `n`) and `b` (length `m`) under a
/// row-major `n × m` cost. The plan is written row-major to `plan_out`.
///
/// # Safety
/// `cost` and `plan_out` must hold `n * m` values, `a` `n` and `b` `m`; `info`
/// may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn adattt_sinkhorn(
    cost: *const f64,
    a: *const f64,
    n: usize,
    b: *const f64,
    m: usize,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
    plan_out: *mut f64,
    info: *mut AdatttSinkhornInfo,
) -> AdatttStatus {
    guard(|| {
        if n == 0 || m == 0 {
            return fail(AdatttStatus::InvalidArgument, "empty marginals");
        }
        let len = n
            .checked_mul(m)
            .ok_or(Failure(AdatttStatus::InvalidArgument, "n * m overflows".into()))?;
        let c = slice_arg(cost, len, "cost")?;
        let (a, b) = (slice_arg(a, n, "a")?, slice_arg(b, m, "b")?);
        non_null(plan_out, "plan_out")?;
        let rows: Vec<Vec<f64>> = c.chunks(m).map(<[f64]>::to_vec).collect();
        let plan = transport::sinkhorn(&rows, a, b, epsilon, max_iter, tol).or_else(|e| {
            let status = match e {
                transport::TransportError::NonFinite(_) => AdatttStatus::Numeric,
                _ => AdatttStatus::InvalidArgument,
            };
            fail(status, e.to_string())
        })?;
        let out = std::slice::from_raw_parts_mut(plan_out, len);
        for (dst, src) in out.iter_mut().zip(plan.gamma.iter().flatten()) {
            *dst = *src;
        }
        if let Some(i) = info.as_mut() {
            *i = AdatttSinkhornInfo {
                iterations: plan.iterations_used,
                converged: plan.converged,
                cost: transport::ot_cost(&plan),
            };
        }
        Ok(())
    })
}

/// The η ∈ [0, ½] whose binary entropy (bits) is `h`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adattt_binary_entropy_inverse(h: f64, out: *mut f64) -> AdatttStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = bounds::binary_entropy_inverse(h, bounds::INVERSE_TOL)
            .or_else(|e| fail(AdatttStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Check the binary error sandwich on a Markov joint `p[ys][z][ym]` (flat,
/// `s * r * 2` cells). With `ideal` the lower bound uses `H(Y_m|Y_s)`,
/// otherwise `H(Y_m|Z)`.
///
/// # Safety
/// `p` must hold `s * r * 2` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn adattt_check_binary_bounds(
    p: *const f64,
    s: usize,
    r: usize,
    ideal: bool,
    out: *mut AdatttBoundReport,
) -> AdatttStatus {
    guard(|| {
        non_null(out, "out")?;
        let len = s
            .checked_mul(r)
            .and_then(|v| v.checked_mul(2))
            .ok_or(Failure(AdatttStatus::InvalidArgument, "table size overflows".into()))?;
        let table = slice_arg(p, len, "p")?.to_vec();
        let j = DiscreteJoint::new(s, r, 2, table, true).or_else(|e| fail(AdatttStatus::InvalidArgument, e.to_string()))?;
        let rep = bounds::check_theorem1(&j, ideal).or_else(|e| fail(AdatttStatus::InvalidArgument, e.to_string()))?;
        *out = AdatttBoundReport {
            bayes_error: rep.bayes_error,
            lower: if ideal { rep.lower } else { rep.lower_vs_z },
            upper: rep.upper,
            holds: rep.holds,
        };
        Ok(())
    })
}
