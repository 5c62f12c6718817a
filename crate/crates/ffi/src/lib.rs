//! C ABI over `infedit-core`.
//!
//! Objects cross the boundary as opaque handles created by `ie_*_new` style
//! functions and released with the matching `ie_*_free`. Every fallible
//! function returns an [`IeStatus`]; on failure the message is kept per thread
//! and can be fetched with [`ie_last_error_message`]. Panics are caught and
//! reported as `IE_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use infedit_core::denoiser::{Condition, GaussianComponent, MixtureOracle};
use infedit_core::infedit::{infedit_run, VanillaRefiner};
use infedit_core::io::LatentFileError;
use infedit_core::{
    ddcm_step, epsilon_cons, make_linear_schedule, make_timesteps, mse, predict_x0, psnr, read_latent, ssim,
    virtual_invert, write_latent, Error, Latent, NoiseStreams, VarianceSchedule,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Timestep = 4,
    Io = 5,
    Format = 6,
    Capability = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Variance schedule handle.
pub struct IeSchedule(VarianceSchedule);

/// Latent tensor handle (row-major `double`).
pub struct IeLatent(Latent);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(IeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let mut root = &e;
        while let Error::Step { source, .. } = root {
            root = source;
        }
        let status = match root {
            Error::ShapeMismatch { .. } => IeStatus::ShapeMismatch,
            Error::TimestepOutOfRange { .. } | Error::ZeroTimestep(_) | Error::Ordering { .. } | Error::Timesteps(_) => {
                IeStatus::Timestep
            }
            Error::Capability { .. } => IeStatus::Capability,
            _ => IeStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<LatentFileError> for Failure {
    fn from(e: LatentFileError) -> Self {
        let status = match e {
            LatentFileError::Io(_) => IeStatus::Io,
            _ => IeStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(IeStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            IeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            IeStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(IeStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(IeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(IeStatus::NullPointer, "output pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_f64(out: *mut f64, value: f64) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(IeStatus::NullPointer, "output pointer is null".into()));
    }
    *out = value;
    Ok(())
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(IeStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`) and returns the full message length in bytes. Pass a
/// null `buf` to query the length.
#[no_mangle]
pub unsafe extern "C" fn ie_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Linear-beta schedule with `total_steps` noise levels.
#[no_mangle]
pub unsafe extern "C" fn ie_schedule_linear(
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut IeSchedule,
) -> IeStatus {
    guard(|| put(out, IeSchedule(make_linear_schedule(total_steps, beta_start, beta_end)?)))
}

/// Schedule from `alpha_bar[1..=len]`; `alpha_bar[0] = 1` is implied.
#[no_mangle]
pub unsafe extern "C" fn ie_schedule_from_alpha_bar(
    alpha_bar: *const f64,
    len: usize,
    out: *mut *mut IeSchedule,
) -> IeStatus {
    guard(|| {
        let tail = slice(alpha_bar, len, "alpha_bar")?;
        put(out, IeSchedule(VarianceSchedule::from_alpha_bar(tail)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ie_schedule_free(schedule: *mut IeSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Number of noise levels `T`; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ie_schedule_total_steps(schedule: *const IeSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.0.total_steps())
}

#[no_mangle]
pub unsafe extern "C" fn ie_schedule_alpha_bar(schedule: *const IeSchedule, t: usize, out: *mut f64) -> IeStatus {
    guard(|| put_f64(out, as_ref(schedule, "schedule")?.0.alpha_bar(t)?))
}

/// Copies `data` (row-major, `prod(shape)` values) into a new latent.
#[no_mangle]
pub unsafe extern "C" fn ie_latent_new(
    data: *const f64,
    shape: *const usize,
    ndim: usize,
    out: *mut *mut IeLatent,
) -> IeStatus {
    guard(|| {
        let shape = slice(shape, ndim, "shape")?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| invalid("shape overflows"))?;
        let data = slice(data, len, "data")?.to_vec();
        put(out, IeLatent(Latent::from_vec(shape, data)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ie_latent_free(latent: *mut IeLatent) {
    if !latent.is_null() {
        drop(Box::from_raw(latent));
    }
}

/// Number of elements; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ie_latent_len(latent: *const IeLatent) -> usize {
    latent.as_ref().map_or(0, |l| l.0.len())
}

/// Number of dimensions; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ie_latent_ndim(latent: *const IeLatent) -> usize {
    latent.as_ref().map_or(0, |l| l.0.shape().len())
}

/// Writes the dims into `out[0..ndim]`.
#[no_mangle]
pub unsafe extern "C" fn ie_latent_shape(latent: *const IeLatent, out: *mut usize, cap: usize) -> IeStatus {
    guard(|| {
        let shape = as_ref(latent, "latent")?.0.shape();
        copy_out(shape, out, cap)
    })
}

/// Copies the row-major values into `out[0..len]`.
#[no_mangle]
pub unsafe extern "C" fn ie_latent_copy_data(latent: *const IeLatent, out: *mut f64, cap: usize) -> IeStatus {
    guard(|| {
        let values = as_ref(latent, "latent")?.0.to_vec();
        copy_out(&values, out, cap)
    })
}

unsafe fn copy_out<T: Copy>(values: &[T], out: *mut T, cap: usize) -> Result<(), Failure> {
    if cap < values.len() {
        return Err(Failure(
            IeStatus::BufferTooSmall,
            format!("buffer holds {cap} values, need {}", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(Failure(IeStatus::NullPointer, "output buffer is null".into()));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Reads a `.dlt` latent file.
#[no_mangle]
pub unsafe extern "C" fn ie_latent_read(file: *const c_char, out: *mut *mut IeLatent) -> IeStatus {
    guard(|| put(out, IeLatent(read_latent(path(file)?)?)))
}

/// Writes a `.dlt` latent file.
#[no_mangle]
pub unsafe extern "C" fn ie_latent_write(latent: *const IeLatent, file: *const c_char) -> IeStatus {
    guard(|| Ok(write_latent(path(file)?, &as_ref(latent, "latent")?.0)?))
}

/// Clean-latent estimate from a noisy latent and predicted noise at `t >= 1`.
#[no_mangle]
pub unsafe extern "C" fn ie_predict_x0(
    schedule: *const IeSchedule,
    z_t: *const IeLatent,
    t: usize,
    eps: *const IeLatent,
    out: *mut *mut IeLatent,
) -> IeStatus {
    guard(|| {
        let z = predict_x0(&as_ref(z_t, "z_t")?.0, t, &as_ref(eps, "eps")?.0, &as_ref(schedule, "schedule")?.0)?;
        put(out, IeLatent(z))
    })
}

/// Consistent noise `(z_t - sqrt(a) z0) / sqrt(1 - a)` at `t >= 1`.
#[no_mangle]
pub unsafe extern "C" fn ie_epsilon_cons(
    schedule: *const IeSchedule,
    z_t: *const IeLatent,
    t: usize,
    z0: *const IeLatent,
    out: *mut *mut IeLatent,
) -> IeStatus {
    guard(|| {
        let e = epsilon_cons(&as_ref(z_t, "z_t")?.0, t, &as_ref(z0, "z0")?.0, &as_ref(schedule, "schedule")?.0)?;
        put(out, IeLatent(e))
    })
}

/// Re-noises a clean estimate to `t_prev` with fresh `noise`.
#[no_mangle]
pub unsafe extern "C" fn ie_ddcm_step(
    schedule: *const IeSchedule,
    z0_pred: *const IeLatent,
    t_prev: usize,
    noise: *const IeLatent,
    out: *mut *mut IeLatent,
) -> IeStatus {
    guard(|| {
        let z = ddcm_step(&as_ref(z0_pred, "z0_pred")?.0, t_prev, &as_ref(noise, "noise")?.0, &as_ref(schedule, "schedule")?.0)?;
        put(out, IeLatent(z))
    })
}

/// Virtual inversion round trip over `steps` sampling timesteps, seeded by
/// `seed`. Writes the reconstruction to `out` and, if `max_abs_error` is not
/// null, its largest deviation from `z0`.
#[no_mangle]
pub unsafe extern "C" fn ie_virtual_invert(
    schedule: *const IeSchedule,
    z0: *const IeLatent,
    steps: usize,
    seed: u64,
    out: *mut *mut IeLatent,
    max_abs_error: *mut f64,
) -> IeStatus {
    guard(|| {
        let s = &as_ref(schedule, "schedule")?.0;
        let z0 = &as_ref(z0, "z0")?.0;
        let taus = make_timesteps(s.total_steps(), steps.saturating_add(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z, _) = virtual_invert(z0, &taus, s, &mut rng)?;
        let err = z.max_abs_diff(z0)?;
        put(out, IeLatent(z))?;
        if !max_abs_error.is_null() {
            *max_abs_error = err;
        }
        Ok(())
    })
}

/// Inversion-free edit under a Gaussian-mixture oracle whose component `k`
/// has constant mean `means[k]` and scale `std`. Component `source` is the
/// source condition, `target` the target condition.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ie_mixture_edit(
    schedule: *const IeSchedule,
    z0_src: *const IeLatent,
    means: *const f64,
    num_components: usize,
    std: f64,
    source: u32,
    target: u32,
    steps: usize,
    seed: u64,
    out: *mut *mut IeLatent,
) -> IeStatus {
    guard(|| {
        let s = &as_ref(schedule, "schedule")?.0;
        let z0 = &as_ref(z0_src, "z0_src")?.0;
        let comps = slice(means, num_components, "means")?
            .iter()
            .map(|&m| GaussianComponent::new(Latent::filled(z0.shape(), m), std))
            .collect::<Result<Vec<_>, _>>()?;
        let oracle = MixtureOracle::new(comps, s.clone())?;
        let taus = make_timesteps(s.total_steps(), steps.saturating_add(1))?;
        let outcome = infedit_run(
            z0,
            &Condition::new(vec![source])?,
            &Condition::new(vec![target])?,
            &oracle,
            &taus,
            s,
            &VanillaRefiner,
            &NoiseStreams::new(seed),
        )?;
        put(out, IeLatent(outcome.z0_tgt))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ie_mse(a: *const IeLatent, b: *const IeLatent, out: *mut f64) -> IeStatus {
    guard(|| put_f64(out, mse(&as_ref(a, "a")?.0, &as_ref(b, "b")?.0)?))
}

/// PSNR in dB; positive infinity for identical inputs.
#[no_mangle]
pub unsafe extern "C" fn ie_psnr(a: *const IeLatent, b: *const IeLatent, max_val: f64, out: *mut f64) -> IeStatus {
    guard(|| put_f64(out, psnr(&as_ref(a, "a")?.0, &as_ref(b, "b")?.0, max_val)?))
}

/// SSIM of two 2-D latents over non-overlapping 8x8 windows.
#[no_mangle]
pub unsafe extern "C" fn ie_ssim(a: *const IeLatent, b: *const IeLatent, out: *mut f64) -> IeStatus {
    guard(|| put_f64(out, ssim(&as_ref(a, "a")?.0, &as_ref(b, "b")?.0)?))
}
