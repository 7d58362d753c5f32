//! C ABI over the ditcal library.
//!
//! Every function returns a [`DitcalStatus`]; on failure the message is
//! available from [`ditcal_last_error_message`] on the same thread. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ditcal::calibration::{dimension, Granularity, SearchSpace};
use ditcal::cmaes::CmaState;
use ditcal::dit::sampler::sample_items;
use ditcal::dit::{ArchSpec, DitModel, Variant};
use ditcal::harness::checkpoint::Checkpoint;
use ditcal::numerics::rng::stream;
use ditcal::numerics::{Rng, Tensor};
use ditcal::rewards::template_correlation;
use ditcal::Error;

/// Pixels in one generated image (8 × 8, row-major).
pub const DITCAL_IMAGE_PIXELS: usize = 64;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DitcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    Contract = 5,
    Numeric = 6,
    CalibrationShape = 7,
    Protocol = 8,
    Evaluation = 9,
    Training = 10,
    Config = 11,
    Checkpoint = 12,
    DimensionOverflow = 13,
    Io = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DitcalVariant {
    StandardDit = 0,
    MmDit = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DitcalGranularity {
    Block = 0,
    Layer = 1,
    Gate = 2,
}

/// Architecture description used by [`ditcal_model_new`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DitcalArch {
    pub variant: DitcalVariant,
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub text_tokens: usize,
    pub class_count: usize,
}

/// Opaque model handle.
pub struct DitcalModel {
    model: DitModel,
}

/// Opaque CMA-ES handle.
pub struct DitcalCma {
    state: CmaState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DitcalStatus {
    match e {
        Error::Dimension(_) => DitcalStatus::Dimension,
        Error::NonFinite(_) => DitcalStatus::NonFinite,
        Error::Contract(_) => DitcalStatus::Contract,
        Error::Numeric(_) => DitcalStatus::Numeric,
        Error::CalibrationShape(_) => DitcalStatus::CalibrationShape,
        Error::Protocol(_) => DitcalStatus::Protocol,
        Error::Evaluation(_) => DitcalStatus::Evaluation,
        Error::Training { .. } => DitcalStatus::Training,
        Error::Config { .. } => DitcalStatus::Config,
        Error::Checkpoint(_) => DitcalStatus::Checkpoint,
        Error::DimensionOverflow { .. } => DitcalStatus::DimensionOverflow,
        Error::Io(_) => DitcalStatus::Io,
    }
}

enum Failure {
    Status(DitcalStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(DitcalStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(DitcalStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error or panic, and converts the outcome to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DitcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DitcalStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DitcalStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` is null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` is null or a live handle.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `out` is null or valid for one write.
unsafe fn write<T>(out: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn granularity(g: DitcalGranularity) -> Granularity {
    match g {
        DitcalGranularity::Block => Granularity::Block,
        DitcalGranularity::Layer => Granularity::Layer,
        DitcalGranularity::Gate => Granularity::Gate,
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ditcal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ditcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a freshly initialized model.
///
/// # Safety
/// `arch` must point to a valid `DitcalArch`; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_model_new(
    arch: *const DitcalArch,
    seed: u64,
    out: *mut *mut DitcalModel,
) -> DitcalStatus {
    guard(|| {
        let a = handle(arch, "arch")?;
        let spec = ArchSpec {
            variant: match a.variant {
                DitcalVariant::StandardDit => Variant::StandardDit,
                DitcalVariant::MmDit => Variant::MmDit,
            },
            depth: a.depth,
            model_dim: a.model_dim,
            heads: a.heads,
            ff_mult: a.ff_mult,
            text_tokens: a.text_tokens,
            class_count: a.class_count,
        };
        let model = DitModel::init(spec, seed)?;
        write(out, Box::into_raw(Box::new(DitcalModel { model })), "out")
    })
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_model_load(path: *const c_char, out: *mut *mut DitcalModel) -> DitcalStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let ck = Checkpoint::load(Path::new(p))?;
        write(out, Box::into_raw(Box::new(DitcalModel { model: ck.model })), "out")
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ditcal_model_free(model: *mut DitcalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of blocks.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_model_depth(model: *const DitcalModel, out: *mut usize) -> DitcalStatus {
    guard(|| write(out, handle(model, "model")?.model.arch.depth, "out"))
}

/// Number of real classes; the null class is this value.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_model_class_count(model: *const DitcalModel, out: *mut usize) -> DitcalStatus {
    guard(|| write(out, handle(model, "model")?.model.arch.class_count, "out"))
}

/// Length of a calibration vector (output weight first, then scales) at `g`.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_calibration_dimension(
    model: *const DitcalModel,
    g: DitcalGranularity,
    out: *mut usize,
) -> DitcalStatus {
    guard(|| {
        write(
            out,
            dimension(granularity(g), &handle(model, "model")?.model.arch),
            "out",
        )
    })
}

/// Samples one 8×8 image with `nfe` Euler steps. A null `calibration` with
/// zero length samples the unmodified model; otherwise `calibration` holds
/// `calibration_len` values at granularity `g`.
///
/// # Safety
/// `model` must be a live handle; `calibration` valid for `calibration_len`
/// reads; `out_pixels` valid for 64 writes.
#[no_mangle]
pub unsafe extern "C" fn ditcal_model_sample(
    model: *const DitcalModel,
    class_id: usize,
    seed: u64,
    nfe: usize,
    guidance_scale: f64,
    g: DitcalGranularity,
    calibration: *const f64,
    calibration_len: usize,
    out_pixels: *mut f64,
) -> DitcalStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        if class_id > m.arch.class_count {
            return Err(invalid(format!("class {class_id} out of range")));
        }
        let space = SearchSpace {
            guidance_scale,
            ..SearchSpace::single(m.arch.clone(), granularity(g))
        };
        let given = slice(calibration, calibration_len, "calibration")?;
        let point = if given.is_empty() {
            space.identity_point()
        } else {
            given.to_vec()
        };
        let field = space.field(m, &point)?;
        let img = sample_items(field.as_ref(), &[(class_id, seed)], nfe)?.remove(0);
        slice_mut(out_pixels, DITCAL_IMAGE_PIXELS, "out_pixels")?.copy_from_slice(img.data());
        Ok(())
    })
}

/// Pearson correlation of 64 pixels with the template of `class_id`.
///
/// # Safety
/// `pixels` valid for 64 reads; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_template_correlation(
    pixels: *const f64,
    class_id: usize,
    out: *mut f64,
) -> DitcalStatus {
    guard(|| {
        let px = slice(pixels, DITCAL_IMAGE_PIXELS, "pixels")?;
        let img = Tensor::new(vec![8, 8], px.to_vec())?;
        write(out, template_correlation(&img, class_id)?, "out")
    })
}

/// Creates an optimizer at `mean0` (length `dim`) with step size `sigma0`.
/// `lambda` of zero selects `4 + ⌊3 ln dim⌋`.
///
/// # Safety
/// `mean0` valid for `dim` reads; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_new(
    dim: usize,
    mean0: *const f64,
    sigma0: f64,
    lambda: usize,
    seed: u64,
    out: *mut *mut DitcalCma,
) -> DitcalStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(invalid(format!("sigma0 must be positive, got {sigma0}")));
        }
        let mean = slice(mean0, dim, "mean0")?.to_vec();
        let lambda = (lambda > 0).then_some(lambda);
        let state = CmaState::new(mean, sigma0, lambda, Rng::new(seed, stream::CMA))?;
        write(out, Box::into_raw(Box::new(DitcalCma { state })), "out")
    })
}

/// Releases an optimizer; null is ignored.
///
/// # Safety
/// `cma` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_free(cma: *mut DitcalCma) {
    if !cma.is_null() {
        drop(Box::from_raw(cma));
    }
}

/// Population size λ.
///
/// # Safety
/// `cma` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_lambda(cma: *const DitcalCma, out: *mut usize) -> DitcalStatus {
    guard(|| write(out, handle(cma, "cma")?.state.lambda(), "out"))
}

/// Current step size σ.
///
/// # Safety
/// `cma` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_sigma(cma: *const DitcalCma, out: *mut f64) -> DitcalStatus {
    guard(|| write(out, handle(cma, "cma")?.state.sigma(), "out"))
}

/// Completed generations.
///
/// # Safety
/// `cma` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_generation(cma: *const DitcalCma, out: *mut usize) -> DitcalStatus {
    guard(|| write(out, handle(cma, "cma")?.state.generation(), "out"))
}

/// Copies the distribution mean into `out[0..len]`; `len` must equal the dimension.
///
/// # Safety
/// `cma` must be a live handle; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_mean(cma: *const DitcalCma, out: *mut f64, len: usize) -> DitcalStatus {
    guard(|| {
        let s = &handle(cma, "cma")?.state;
        if len != s.dim() {
            return Err(invalid(format!("mean has {} values, buffer holds {len}", s.dim())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(s.mean());
        Ok(())
    })
}

/// Draws λ candidates into `out` as λ rows of `dim` values; `len` must be λ·dim.
///
/// # Safety
/// `cma` must be a live handle; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_ask(cma: *mut DitcalCma, out: *mut f64, len: usize) -> DitcalStatus {
    guard(|| {
        let s = &mut cma.as_mut().ok_or_else(|| null("cma"))?.state;
        let need = s.lambda() * s.dim();
        if len != need {
            return Err(invalid(format!("ask needs a buffer of {need} values, got {len}")));
        }
        let buf = slice_mut(out, len, "out")?;
        for (row, x) in buf.chunks_mut(s.dim()).zip(s.ask()?) {
            row.copy_from_slice(&x);
        }
        Ok(())
    })
}

/// Reports one reward per candidate of the last ask, in candidate order; higher is better.
///
/// # Safety
/// `cma` must be a live handle; `rewards` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn ditcal_cma_tell(cma: *mut DitcalCma, rewards: *const f64, len: usize) -> DitcalStatus {
    guard(|| {
        let s = &mut cma.as_mut().ok_or_else(|| null("cma"))?.state;
        s.tell(slice(rewards, len, "rewards")?)?;
        Ok(())
    })
}
