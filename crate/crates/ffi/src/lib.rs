//! C ABI over `csikit`.
//!
//! Models are opaque `CsikitModel` handles created by `csikit_model_new` or
//! `csikit_model_load` and released with `csikit_model_free`. Every fallible
//! call returns a `CsikitStatus`; the message of the most recent failure on
//! the calling thread is available from `csikit_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use csikit::conformer::{Ablation, ConformerConfig, ConformerModel};
use csikit::quant::{Bitstream, QuantizerConfig, QuantizerKind};
use csikit::{checkpoint, flops, train, Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsikitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptData = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Quantizer selector for `csikit_model_attach_quantizer`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsikitQuantizer {
    SvqVae = 0,
    Uniform = 1,
    MuLaw = 2,
    BaseVv = 3,
}

/// Architecture variant for `csikit_model_new`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsikitAblation {
    Baseline = 0,
    NoneConv = 1,
    ConformerIi = 2,
}

/// Opaque model handle.
pub struct CsikitModel {
    inner: ConformerModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CsikitStatus {
    match e {
        Error::Io(_) => CsikitStatus::Io,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated { .. }
        | Error::CorruptStream(_)
        | Error::CorruptCheckpoint(_) => CsikitStatus::CorruptData,
        Error::NonFinite(_) => CsikitStatus::NonFinite,
        Error::Config(_) | Error::Usage(_) | Error::Dimension(_) | Error::ConfigMismatch(_) => {
            CsikitStatus::InvalidArgument
        }
    }
}

struct Failure(CsikitStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsikitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsikitStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CsikitStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CsikitStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `model` must be null or a live handle.
unsafe fn model_ref<'a>(model: *const CsikitModel) -> Result<&'a ConformerModel, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn write_out(out: *mut *mut CsikitModel, model: ConformerModel) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: `out` is non-null and the caller promises it is writable.
    unsafe { *out = Box::into_raw(Box::new(CsikitModel { inner: model })) };
    Ok(())
}

/// Builds a freshly initialized model with the default architecture at
/// compression ratio `cr`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_new(
    cr: u32,
    ablation: CsikitAblation,
    seed: u64,
    out: *mut *mut CsikitModel,
) -> CsikitStatus {
    guard(|| {
        let variant = match ablation {
            CsikitAblation::Baseline => Ablation::Baseline,
            CsikitAblation::NoneConv => Ablation::NoneConv,
            CsikitAblation::ConformerIi => Ablation::ConformerII,
        };
        let cfg = ConformerConfig::with_cr(cr as usize).ablation(variant);
        write_out(out, ConformerModel::new(cfg, seed)?)
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_load(path: *const c_char, out: *mut *mut CsikitModel) -> CsikitStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(CsikitStatus::InvalidArgument, "path is not UTF-8".into()))?;
        write_out(out, checkpoint::load(Path::new(p))?)
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_save(model: *const CsikitModel, path: *const c_char) -> CsikitStatus {
    guard(|| {
        let m = model_ref(model)?;
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(CsikitStatus::InvalidArgument, "path is not UTF-8".into()))?;
        checkpoint::save(m, Path::new(p))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_free(model: *mut CsikitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Attaches a quantizer with `bits` bits per index (embedding length 32).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_attach_quantizer(
    model: *mut CsikitModel,
    kind: CsikitQuantizer,
    bits: u8,
    seed: u64,
) -> CsikitStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let kind = match kind {
            CsikitQuantizer::SvqVae => QuantizerKind::Svqvae,
            CsikitQuantizer::Uniform => QuantizerKind::Uniform,
            CsikitQuantizer::MuLaw => QuantizerKind::Mulaw,
            CsikitQuantizer::BaseVv => QuantizerKind::BaseVv,
        };
        m.inner.attach_quantizer(&QuantizerConfig::new(kind, bits), seed)?;
        Ok(())
    })
}

/// Number of input values: `rows * cols` of the real CSI matrix.
///
/// # Safety
/// `model` must be null or a live handle; null yields 0.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_input_len(model: *const CsikitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.input_len())
}

/// Codeword length; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_codeword_len(model: *const CsikitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.codeword_len())
}

/// Total parameter count; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_param_count(model: *const CsikitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Encode plus decode FLOPs of the handle's architecture; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csikit_model_flops(model: *const CsikitModel) -> u64 {
    model.as_ref().map_or(0, |m| flops::flops_count(&m.inner.config))
}

fn input_tensor(m: &ConformerModel, input: &[f64]) -> Result<Tensor, Failure> {
    Ok(Tensor::matrix(m.config.seq_len, m.config.d_model, input.to_vec())?)
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(Failure(CsikitStatus::InvalidArgument, format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

/// Encodes one row-major real CSI matrix into a codeword.
///
/// # Safety
/// `input` must hold `input_len` values and `codeword` room for `codeword_len`.
#[no_mangle]
pub unsafe extern "C" fn csikit_encode(
    model: *const CsikitModel,
    input: *const f64,
    input_len: usize,
    codeword: *mut f64,
    codeword_len: usize,
) -> CsikitStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_len(input_len, m.config.input_len(), "input")?;
        check_len(codeword_len, m.config.codeword_len(), "codeword")?;
        let x = input_tensor(m, slice(input, input_len, "input")?)?;
        let cw = m.encode_tensor(&x)?;
        slice_mut(codeword, codeword_len, "codeword")?.copy_from_slice(cw.data());
        Ok(())
    })
}

/// Decodes a codeword into a row-major real CSI matrix.
///
/// # Safety
/// `codeword` must hold `codeword_len` values and `output` room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn csikit_decode(
    model: *const CsikitModel,
    codeword: *const f64,
    codeword_len: usize,
    output: *mut f64,
    output_len: usize,
) -> CsikitStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_len(codeword_len, m.config.codeword_len(), "codeword")?;
        check_len(output_len, m.config.input_len(), "output")?;
        let cw = Tensor::vector(slice(codeword, codeword_len, "codeword")?.to_vec());
        let y = m.decode_tensor(&cw)?;
        slice_mut(output, output_len, "output")?.copy_from_slice(y.data());
        Ok(())
    })
}

fn quantizer(m: &ConformerModel) -> Result<&csikit::quant::Quantizer, Failure> {
    m.quantizer
        .as_ref()
        .ok_or_else(|| Failure(CsikitStatus::InvalidArgument, "model has no quantizer".into()))
}

/// Quantizes a codeword into a framed bitstream. `written` receives the
/// stream length; when `capacity` is too small the call fails with
/// `BUFFER_TOO_SMALL` and `written` holds the required size.
///
/// # Safety
/// `codeword` must hold `codeword_len` values, `out` room for `capacity`
/// bytes (it may be null when `capacity` is 0), and `written` be writable.
#[no_mangle]
pub unsafe extern "C" fn csikit_quantize(
    model: *const CsikitModel,
    codeword: *const f64,
    codeword_len: usize,
    out: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> CsikitStatus {
    guard(|| {
        let m = model_ref(model)?;
        let q = quantizer(m)?;
        if written.is_null() {
            return Err(null("written"));
        }
        check_len(codeword_len, m.config.codeword_len(), "codeword")?;
        let cw = Tensor::vector(slice(codeword, codeword_len, "codeword")?.to_vec());
        let bytes = q.quantize(&m.params, &cw)?.to_bytes();
        *written = bytes.len();
        if capacity < bytes.len() {
            return Err(Failure(
                CsikitStatus::BufferTooSmall,
                format!("stream needs {} bytes, buffer holds {capacity}", bytes.len()),
            ));
        }
        slice_mut(out, capacity, "out")?[..bytes.len()].copy_from_slice(&bytes);
        Ok(())
    })
}

/// Parses a framed bitstream and writes the dequantized codeword.
///
/// # Safety
/// `stream` must hold `stream_len` bytes and `codeword` room for `codeword_len`.
#[no_mangle]
pub unsafe extern "C" fn csikit_dequantize(
    model: *const CsikitModel,
    stream: *const u8,
    stream_len: usize,
    codeword: *mut f64,
    codeword_len: usize,
) -> CsikitStatus {
    guard(|| {
        let m = model_ref(model)?;
        let q = quantizer(m)?;
        check_len(codeword_len, m.config.codeword_len(), "codeword")?;
        let bs = Bitstream::from_bytes(slice(stream, stream_len, "stream")?)?;
        let cw = q.dequantize(&m.params, &bs)?;
        slice_mut(codeword, codeword_len, "codeword")?.copy_from_slice(cw.data());
        Ok(())
    })
}

/// Full feedback path (encode, quantize if attached, decode) for one matrix.
///
/// # Safety
/// `input` and `output` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn csikit_reconstruct(
    model: *const CsikitModel,
    input: *const f64,
    output: *mut f64,
    len: usize,
) -> CsikitStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_len(len, m.config.input_len(), "input")?;
        let x = input_tensor(m, slice(input, len, "input")?)?;
        let y = train::reconstruct(m, &x)?;
        slice_mut(output, len, "output")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// FLOPs of the default architecture at compression ratio `cr`; 0 when `cr`
/// is not a valid ratio.
#[no_mangle]
pub extern "C" fn csikit_flops(cr: u32) -> u64 {
    let cfg = ConformerConfig::with_cr(cr as usize);
    if cfg.validate().is_err() {
        return 0;
    }
    flops::flops_count(&cfg)
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `capacity > 0`) and returns the full message length
/// excluding the terminator. Returns 0 when no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csikit_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn csikit_status_str(status: CsikitStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CsikitStatus::Ok => c"ok",
        CsikitStatus::NullPointer => c"null pointer",
        CsikitStatus::InvalidArgument => c"invalid argument",
        CsikitStatus::Io => c"I/O error",
        CsikitStatus::CorruptData => c"corrupt data",
        CsikitStatus::NonFinite => c"non-finite value",
        CsikitStatus::BufferTooSmall => c"buffer too small",
        CsikitStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}
