//! C ABI over the `aecodec` encoder, decoder and quality metrics.
//!
//! Every fallible call returns an [`AecStatus`]. On failure a human-readable
//! message is kept per thread and can be read with [`aec_last_error_message`].
//! Buffers handed out by the library must be released with [`aec_buffer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aecodec::codec::{self, LatentMode};
use aecodec::data::{tensor_to_rgb8, ImageRecord};
use aecodec::metrics::MetricsReport;
use aecodec::model::{self, ModelParams};
use aecodec::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    MissingParameter = 5,
    Io = 6,
    Image = 7,
    Internal = 8,
    Panic = 9,
}

/// Values accepted for the `mode` argument of [`aec_encode_rgb8`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AecLatentMode {
    Float32 = 0,
    Uint8 = 1,
}

/// Opaque model handle holding encoder and/or decoder parameters.
pub struct AecModel {
    params: ModelParams,
}

/// Byte buffer owned by the library.
#[repr(C)]
pub struct AecBuffer {
    pub data: *mut u8,
    pub len: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AecMetrics {
    /// dB; infinite for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> AecStatus {
    match err {
        Error::Dimension(_) => AecStatus::Dimension,
        Error::Format { .. } => AecStatus::Format,
        Error::MissingParameter(_) => AecStatus::MissingParameter,
        Error::Io(_) => AecStatus::Io,
        Error::Image { .. } => AecStatus::Image,
        Error::Config(_) => AecStatus::InvalidArgument,
        _ => AecStatus::Internal,
    }
}

struct Failure(AecStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AecStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, records any error or panic, and maps it to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AecStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AecStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            AecStatus::Panic
        }
    }
}

fn into_buffer(bytes: Vec<u8>) -> AecBuffer {
    let mut boxed = bytes.into_boxed_slice();
    let buf = AecBuffer {
        data: boxed.as_mut_ptr(),
        len: boxed.len(),
    };
    std::mem::forget(boxed);
    buf
}

unsafe fn slice<'a>(data: *const u8, len: usize, what: &str) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn rgb8_record(pixels: *const u8, width: usize, height: usize) -> Result<ImageRecord, Failure> {
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Failure(AecStatus::InvalidArgument, "image extents overflow".into()))?;
    let bytes = slice(pixels, len, "pixels")?;
    Ok(ImageRecord::from_rgb8("<ffi>", width, height, bytes.to_vec())?)
}

/// Message for the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn aec_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aec_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version contains a NUL"),
    };
    VERSION.as_ptr()
}

/// Loads AEW1 weights (full model, encoder-only or decoder-only) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aec_model_load(path: *const c_char, out: *mut *mut AecModel) -> AecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(AecStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let params = codec::load_weights(Path::new(path))?;
        *out = Box::into_raw(Box::new(AecModel { params }));
        Ok(())
    })
}

/// Parses AEW1 weights from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aec_model_from_bytes(data: *const u8, len: usize, out: *mut *mut AecModel) -> AecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = codec::decode_weights(slice(data, len, "data")?)?;
        *out = Box::into_raw(Box::new(AecModel { params }));
        Ok(())
    })
}

/// Creates a randomly initialized full model.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aec_model_init(seed: u64, out: *mut *mut AecModel) -> AecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(AecModel {
            params: model::init_params(seed),
        }));
        Ok(())
    })
}

/// Serializes the model's parameters as AEW1 bytes.
///
/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aec_model_save_bytes(model: *const AecModel, out: *mut AecBuffer) -> AecStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = into_buffer(codec::encode_weights(&model.params)?);
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aec_model_free(model: *mut AecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Encodes an interleaved RGB8 image (`width*height*3` bytes) into an AEL1
/// latent file. Both extents must be positive multiples of 16.
///
/// # Safety
/// `pixels` must point to `width*height*3` readable bytes; `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aec_encode_rgb8(
    model: *const AecModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    mode: u32,
    out: *mut AecBuffer,
) -> AecStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match mode {
            m if m == AecLatentMode::Float32 as u32 => LatentMode::Float32,
            m if m == AecLatentMode::Uint8 as u32 => LatentMode::Uint8,
            m => return Err(Failure(AecStatus::InvalidArgument, format!("unknown latent mode {m}"))),
        };
        let record = rgb8_record(pixels, width, height)?;
        let x = record.to_tensor().reshape(vec![1, 3, height, width])?;
        let latent = model::encode(&x, &model.params)?;
        *out = into_buffer(codec::serialize_latent(&latent, mode)?);
        Ok(())
    })
}

/// Decodes an AEL1 latent file into an interleaved RGB8 image.
///
/// # Safety
/// `latent` must point to `len` readable bytes; all out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn aec_decode_rgb8(
    model: *const AecModel,
    latent: *const u8,
    len: usize,
    out: *mut AecBuffer,
    out_width: *mut usize,
    out_height: *mut usize,
) -> AecStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() || out_width.is_null() || out_height.is_null() {
            return Err(null("out"));
        }
        let code = codec::deserialize_latent(slice(latent, len, "latent")?)?;
        let image = model::decode(&code, &model.params)?;
        let (w, h, pixels) = tensor_to_rgb8(&image)?;
        *out = into_buffer(pixels);
        *out_width = w;
        *out_height = h;
        Ok(())
    })
}

/// PSNR (dB), SSIM and MSE between two RGB8 images of the same extents.
///
/// # Safety
/// `a` and `b` must each point to `width*height*3` readable bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aec_metrics_rgb8(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut AecMetrics,
) -> AecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = rgb8_record(a, width, height)?.to_tensor();
        let b = rgb8_record(b, width, height)?.to_tensor();
        let r = MetricsReport::compare(&a, &b)?;
        *out = AecMetrics {
            psnr: r.psnr,
            ssim: r.ssim,
            mse: r.mse,
        };
        Ok(())
    })
}

/// Releases a buffer returned by the library and resets it to empty.
///
/// # Safety
/// `buf` must be null or point to a buffer filled by this library.
#[no_mangle]
pub unsafe extern "C" fn aec_buffer_free(buf: *mut AecBuffer) {
    if let Some(b) = buf.as_mut() {
        if !b.data.is_null() {
            drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
        }
        b.data = ptr::null_mut();
        b.len = 0;
    }
}
