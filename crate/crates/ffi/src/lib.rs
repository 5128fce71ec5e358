//! C ABI over the `avshield` library.
//!
//! Every function returns an [`AvsStatus`]. On failure a message is stored per
//! thread and can be read with [`avs_last_error`]. Images cross the boundary as
//! channel-major `[3, height, width]` `double` arrays in `[0, 1]`; audio as mono
//! 16 kHz `double` samples in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use avshield::audio_attack::{attack_audio, db_x, AudioAttackConfig, CafTargetPlan};
use avshield::image_attack::{attack_image, ImageAttackConfig, IntervalPlan};
use avshield::victim::{checkpoint, AudioClip, PortraitImage, VictimModel};
use avshield::{metrics, Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AvsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Attack = 5,
    Internal = 6,
}

/// Opaque handle to a loaded victim model.
pub struct AvsModel {
    inner: VictimModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AvsImageAttackParams {
    /// L-infinity budget.
    pub tau: f64,
    pub step: f64,
    pub iters: usize,
    pub seed: u64,
    /// Frames per iteration; 0 uses every frame.
    pub frames_per_step: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AvsAudioAttackParams {
    /// Peak level of the perturbation relative to the clip, in dB.
    pub db_bound: f64,
    /// Step size; 0 or less picks the default for the budget.
    pub step: f64,
    pub iters: usize,
    pub seed: u64,
    /// Frames per iteration; 0 uses every frame.
    pub frames_per_step: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> AvsStatus {
    match err {
        Error::Io { .. } | Error::Codec { .. } | Error::Json(_) => AvsStatus::Io,
        Error::Config(_) => AvsStatus::Config,
        Error::Attack { .. } | Error::Training { .. } => AvsStatus::Attack,
        _ => AvsStatus::InvalidArgument,
    }
}

struct Fail(AvsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AvsStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AvsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AvsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AvsStatus::Internal
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable doubles at `ptr`.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` writable doubles at `ptr`.
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, len) })
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: caller guarantees a valid, writable `T` when non-null.
    unsafe { ptr.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn portrait(ptr: *const f64, height: usize, width: usize, what: &str) -> Result<PortraitImage, Fail> {
    let data = unsafe { slice(ptr, 3 * height * width, what) }?;
    Ok(PortraitImage::new(Tensor::new(vec![3, height, width], data.to_vec())?)?)
}

unsafe fn clip(ptr: *const f64, len: usize, what: &str) -> Result<AudioClip, Fail> {
    let data = unsafe { slice(ptr, len, what) }?;
    Ok(AudioClip::new(data.to_vec())?)
}

unsafe fn model_ref<'a>(model: *const AvsModel) -> Result<&'a VictimModel, Fail> {
    // SAFETY: non-null handles come from `avs_model_load`.
    unsafe { model.as_ref() }.map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn frames(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

/// Message for the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn avs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn avs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint; free the handle with [`avs_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn avs_model_load(path: *const c_char, out_model: *mut *mut AvsModel) -> AvsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let slot = unsafe { out(out_model, "out_model") }?;
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Fail(AvsStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let inner = checkpoint::load(Path::new(path))?;
        *slot = Box::into_raw(Box::new(AvsModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`avs_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn avs_model_free(model: *mut AvsModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `out_params` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avs_image_attack_defaults(out_params: *mut AvsImageAttackParams) -> AvsStatus {
    guard(|| {
        let d = ImageAttackConfig::default();
        *unsafe { out(out_params, "out_params") }? = AvsImageAttackParams {
            tau: d.tau,
            step: d.eta_p,
            iters: d.iters,
            seed: d.seed,
            frames_per_step: d.frames_per_step.unwrap_or(0),
        };
        Ok(())
    })
}

/// # Safety
/// `out_params` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avs_audio_attack_defaults(out_params: *mut AvsAudioAttackParams) -> AvsStatus {
    guard(|| {
        let d = AudioAttackConfig::default();
        *unsafe { out(out_params, "out_params") }? = AvsAudioAttackParams {
            db_bound: d.db_bound,
            step: d.eta_a.unwrap_or(0.0),
            iters: d.iters,
            seed: d.seed,
            frames_per_step: d.frames_per_step.unwrap_or(0),
        };
        Ok(())
    })
}

/// Protects a portrait with the default multi-interval plan. `out_pixels` receives
/// `3 * height * width` values and may alias nothing else.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn avs_protect_image(
    model: *const AvsModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    audio: *const f64,
    audio_len: usize,
    params: *const AvsImageAttackParams,
    out_pixels: *mut f64,
) -> AvsStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let p = unsafe { params.as_ref() }.ok_or_else(|| null("params"))?;
        let image = unsafe { portrait(pixels, height, width, "pixels") }?;
        let audio = unsafe { clip(audio, audio_len, "audio") }?;
        let dst = unsafe { slice_mut(out_pixels, 3 * height * width, "out_pixels") }?;
        let cfg = ImageAttackConfig {
            tau: p.tau,
            eta_p: p.step,
            iters: p.iters,
            seed: p.seed,
            frames_per_step: frames(p.frames_per_step),
        };
        let (protected, _) = attack_image(m, &image, &audio, &cfg, &IntervalPlan::default())?;
        dst.copy_from_slice(protected.data());
        Ok(())
    })
}

/// Protects an audio clip with the default cross-attention target plan.
/// `out_audio` receives `audio_len` samples.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn avs_protect_audio(
    model: *const AvsModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    audio: *const f64,
    audio_len: usize,
    params: *const AvsAudioAttackParams,
    out_audio: *mut f64,
) -> AvsStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        let p = unsafe { params.as_ref() }.ok_or_else(|| null("params"))?;
        let image = unsafe { portrait(pixels, height, width, "pixels") }?;
        let clip = unsafe { clip(audio, audio_len, "audio") }?;
        let dst = unsafe { slice_mut(out_audio, audio_len, "out_audio") }?;
        let cfg = AudioAttackConfig {
            db_bound: p.db_bound,
            eta_a: (p.step > 0.0).then_some(p.step),
            iters: p.iters,
            seed: p.seed,
            frames_per_step: frames(p.frames_per_step),
        };
        let (protected, _) = attack_audio(m, &image, &clip, &cfg, &CafTargetPlan::default())?;
        dst.copy_from_slice(protected.samples());
        Ok(())
    })
}

/// # Safety
/// `a` and `b` must each hold `3 * height * width` values; `out_db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avs_psnr(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    out_db: *mut f64,
) -> AvsStatus {
    guard(|| {
        let (a, b) = unsafe { (portrait(a, height, width, "a")?, portrait(b, height, width, "b")?) };
        *unsafe { out(out_db, "out_db") }? = metrics::psnr(&a, &b)?;
        Ok(())
    })
}

/// # Safety
/// `a` and `b` must each hold `3 * height * width` values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avs_ssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    out_value: *mut f64,
) -> AvsStatus {
    guard(|| {
        let (a, b) = unsafe { (portrait(a, height, width, "a")?, portrait(b, height, width, "b")?) };
        *unsafe { out(out_value, "out_value") }? = metrics::ssim(&a, &b)?;
        Ok(())
    })
}

/// # Safety
/// `clean` and `noisy` must each hold `len` samples; `out_db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avs_snr(clean: *const f64, noisy: *const f64, len: usize, out_db: *mut f64) -> AvsStatus {
    guard(|| {
        let (c, n) = unsafe { (clip(clean, len, "clean")?, clip(noisy, len, "noisy")?) };
        *unsafe { out(out_db, "out_db") }? = metrics::snr(&c, &n)?;
        Ok(())
    })
}

/// Peak level of `delta` relative to `x` in dB; `-inf` for an all-zero `delta`.
///
/// # Safety
/// `delta` and `x` must each hold `len` samples; `out_db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avs_db_x(delta: *const f64, x: *const f64, len: usize, out_db: *mut f64) -> AvsStatus {
    guard(|| {
        let (d, x) = unsafe { (slice(delta, len, "delta")?, slice(x, len, "x")?) };
        *unsafe { out(out_db, "out_db") }? = db_x(d, x)?;
        Ok(())
    })
}

/// Pearson correlation of two series; 0 when either is constant.
///
/// # Safety
/// `a` and `b` must each hold `len` values; `out_r` must be writable.
#[no_mangle]
pub unsafe extern "C" fn avs_pearson(a: *const f64, b: *const f64, len: usize, out_r: *mut f64) -> AvsStatus {
    guard(|| {
        let (a, b) = unsafe { (slice(a, len, "a")?, slice(b, len, "b")?) };
        *unsafe { out(out_r, "out_r") }? = metrics::pearson(a, b)?;
        Ok(())
    })
}
