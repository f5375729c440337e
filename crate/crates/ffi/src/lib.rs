//! C interface to `fcmae`: load a checkpoint, embed FC matrices, and the
//! standalone Pearson, permutation-p and Khatri–Rao helpers.
//!
//! Every fallible function returns an [`FcmaeStatus`]; on failure the message
//! is kept per thread and can be copied out with
//! [`fcmae_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fcmae::fc::FcMatrix;
use fcmae::mae::{load_checkpoint, MaeModel, Pooling};
use fcmae::nn::Tensor;
use fcmae::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcmaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Io = 6,
    Corrupt = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Which encoder output becomes the embedding.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcmaePooling {
    Cls = 0,
    Mean = 1,
}

/// Opaque handle to a loaded model.
pub struct FcmaeModel {
    inner: MaeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FcmaeStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) => FcmaeStatus::InvalidArgument,
        Error::Config(_) | Error::ConfigMismatch(_) => FcmaeStatus::Config,
        Error::Data(_) | Error::Csv(_) => FcmaeStatus::Data,
        Error::Numeric(_) | Error::EmptyMask | Error::NoForward => FcmaeStatus::Numeric,
        Error::Io { .. } => FcmaeStatus::Io,
        Error::Corrupt(_) | Error::Version { .. } => FcmaeStatus::Corrupt,
    }
}

fn fail(status: FcmaeStatus, msg: impl Into<String>) -> FcmaeStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), FcmaeStatus>) -> FcmaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FcmaeStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(FcmaeStatus::Panic, "internal panic"),
    }
}

fn lift(e: Error) -> FcmaeStatus {
    fail(status_of(&e), e.to_string())
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], FcmaeStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(FcmaeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], FcmaeStatus> {
    if ptr.is_null() {
        return Err(fail(FcmaeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fcmae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length plus
/// one, or 0 when there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fcmae_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fcmae_model_load(path: *const c_char, out: *mut *mut FcmaeModel) -> FcmaeStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(FcmaeStatus::NullPointer, "path or out is null"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(FcmaeStatus::InvalidArgument, "path is not UTF-8"))?;
        let model = load_checkpoint(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(FcmaeModel { inner: model }));
        Ok(())
    })
}

/// Frees a model; null is ignored.
///
/// # Safety
/// `model` must come from [`fcmae_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fcmae_model_free(model: *mut FcmaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fcmae_model_embed_dim(model: *const FcmaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.embed_dim())
}

/// Region count `R` the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fcmae_model_region_count(model: *const FcmaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.region_count())
}

/// Total number of learnable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fcmae_model_param_count(model: *const FcmaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Embeds one `regions x regions` row-major FC matrix into `out`
/// (`out_len` must be at least the embedding width). `pooling` is a
/// [`FcmaePooling`] value.
///
/// # Safety
/// `fc` must point to `regions * regions` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn fcmae_model_encode(
    model: *const FcmaeModel,
    fc: *const f64,
    regions: usize,
    pooling: u32,
    out: *mut f64,
    out_len: usize,
) -> FcmaeStatus {
    guard(|| {
        let model = model
            .as_ref()
            .ok_or_else(|| fail(FcmaeStatus::NullPointer, "model is null"))?;
        let pooling = match pooling {
            0 => Pooling::Cls,
            1 => Pooling::Mean,
            p => return Err(fail(FcmaeStatus::InvalidArgument, format!("unknown pooling {p}"))),
        };
        let n = regions
            .checked_mul(regions)
            .ok_or_else(|| fail(FcmaeStatus::InvalidArgument, "region count overflows"))?;
        let values = slice(fc, n, "fc")?;
        let dim = model.inner.embed_dim();
        if out_len < dim {
            return Err(fail(
                FcmaeStatus::BufferTooSmall,
                format!("output holds {out_len} values, embedding has {dim}"),
            ));
        }
        let out = slice_mut(out, out_len, "out")?;
        let fc = FcMatrix::new(regions, values.to_vec()).map_err(lift)?;
        let emb = model.inner.encode_fc(&fc, pooling).map_err(lift)?;
        out[..dim].copy_from_slice(&emb);
        Ok(())
    })
}

/// Pearson correlation of two length-`n` arrays.
///
/// # Safety
/// `y` and `yhat` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fcmae_pearson(y: *const f64, yhat: *const f64, n: usize, out: *mut f64) -> FcmaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FcmaeStatus::NullPointer, "out is null"));
        }
        let r = fcmae::eval::pearson(slice(y, n, "y")?, slice(yhat, n, "yhat")?).map_err(lift)?;
        *out = r;
        Ok(())
    })
}

/// One-sided permutation p-value of `observed` against `n` null values.
///
/// # Safety
/// `nulls` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fcmae_permutation_p(observed: f64, nulls: *const f64, n: usize, out: *mut f64) -> FcmaeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FcmaeStatus::NullPointer, "out is null"));
        }
        *out = fcmae::eval::permutation_p(observed, slice(nulls, n, "nulls")?).map_err(lift)?;
        Ok(())
    })
}

/// Column-wise Kronecker product of row-major `a` (`a_rows x cols`) and
/// `b` (`b_rows x cols`) into row-major `out` (`a_rows * b_rows x cols`).
///
/// # Safety
/// Pointers must cover the stated sizes; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fcmae_khatri_rao(
    a: *const f64,
    a_rows: usize,
    b: *const f64,
    b_rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> FcmaeStatus {
    guard(|| {
        let need = a_rows
            .checked_mul(b_rows)
            .and_then(|r| r.checked_mul(cols))
            .ok_or_else(|| fail(FcmaeStatus::InvalidArgument, "size overflows"))?;
        if out_len < need {
            return Err(fail(
                FcmaeStatus::BufferTooSmall,
                format!("output holds {out_len} values, product has {need}"),
            ));
        }
        let a = Tensor::matrix(a_rows, cols, slice(a, a_rows * cols, "a")?.to_vec()).map_err(lift)?;
        let b = Tensor::matrix(b_rows, cols, slice(b, b_rows * cols, "b")?.to_vec()).map_err(lift)?;
        let product = fcmae::tokenizers::khatri_rao(&a, &b).map_err(lift)?;
        if need > 0 {
            slice_mut(out, out_len, "out")?[..need].copy_from_slice(product.data());
        }
        Ok(())
    })
}
