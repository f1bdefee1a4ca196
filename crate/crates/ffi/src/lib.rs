//! C ABI over `lmc`.
//!
//! Every fallible function returns an [`LmcStatus`]. On failure a message is
//! stored per thread and can be read with [`lmc_last_error_message`].
//! Encoders are opaque handles created by `lmc_encoder_*` and released with
//! [`lmc_encoder_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lmc::checkpoint::{load_checkpoint, save_checkpoint};
use lmc::encoder::{forward, init_params, EmbeddingBatch, EncoderConfig, EncoderParams};
use lmc::loss::{cross_correlation, lmc_loss as loss_of};
use lmc::metrics::{fit_gaussian, w2_gaussian};
use lmc::stain_math::{augment, estimate_stain_basis_rgb, RgbPatch, StainBasis, StainEstimationConfig};
use lmc::trainer::Checkpoint;
use lmc::{Error, ErrorKind};

/// Result codes. Values 2-4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmcStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

/// Loss value split into its two terms.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LmcLossBreakdown {
    pub invariance: f64,
    pub redundancy: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Opaque encoder handle.
pub struct LmcEncoder {
    params: EncoderParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> LmcStatus {
    match err {
        Error::Io { .. } => LmcStatus::Io,
        Error::Format(_) => LmcStatus::Format,
        e => match e.kind() {
            ErrorKind::Config => LmcStatus::Config,
            ErrorKind::Numeric => LmcStatus::Numeric,
            ErrorKind::Data => LmcStatus::Data,
        },
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmcStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            LmcStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            LmcStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must point to `len` readable elements when non-null.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    Ok(std::slice::from_raw_parts(non_null(p, what)?, len))
}

/// # Safety
/// `p` must point to `len` writable elements when non-null.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    let s = CStr::from_ptr(non_null(p, "path")?)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

fn patch_from(rgb: &[u8], width: usize, height: usize) -> Result<RgbPatch, Failure> {
    Ok(RgbPatch::from_interleaved(width, height, rgb)?)
}

fn rows_from(data: &[f64], rows: usize, cols: usize) -> Result<Vec<Vec<f64>>, Failure> {
    if data.len() != rows * cols {
        return Err(Error::InvalidArgument("row data length mismatch".into()).into());
    }
    Ok(data.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lmc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lmc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a freshly initialised encoder. `projector_dim` 0 disables the
/// projector.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn lmc_encoder_init(
    depth: usize,
    heads: usize,
    embed_dim: usize,
    patch_size_tokens: usize,
    input_side: usize,
    mlp_ratio: usize,
    projector_dim: usize,
    seed: u64,
    out: *mut *mut LmcEncoder,
) -> LmcStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = EncoderConfig {
            depth,
            heads,
            embed_dim,
            patch_size_tokens,
            input_side,
            mlp_ratio,
            projector_dim: (projector_dim > 0).then_some(projector_dim),
            seed,
        };
        let params = init_params(&cfg)?;
        *out = Box::into_raw(Box::new(LmcEncoder { params }));
        Ok(())
    })
}

/// Loads encoder parameters from a checkpoint file (training state, if
/// present, is ignored).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmc_encoder_load(path: *const c_char, out: *mut *mut LmcEncoder) -> LmcStatus {
    guard(|| {
        non_null(out, "out")?;
        let ck = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(LmcEncoder { params: ck.params }));
        Ok(())
    })
}

/// Writes the encoder parameters as an encoder-only checkpoint.
///
/// # Safety
/// `enc` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lmc_encoder_save(enc: *const LmcEncoder, path: *const c_char) -> LmcStatus {
    guard(|| {
        let enc = &*non_null(enc, "encoder")?;
        let ck = Checkpoint {
            params: enc.params.clone(),
            training: None,
        };
        save_checkpoint(path_arg(path)?, &ck)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `enc` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmc_encoder_free(enc: *mut LmcEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmc_encoder_embed_dim(enc: *const LmcEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.params.config().output_dim())
}

/// Expected image side in pixels, or 0 for a null handle.
///
/// # Safety
/// `enc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmc_encoder_input_side(enc: *const LmcEncoder) -> usize {
    enc.as_ref().map_or(0, |e| e.params.config().input_side)
}

/// Embeds `n_images` square RGB images stored back to back as interleaved
/// bytes (`n_images * side * side * 3`). Writes `n_images * embed_dim` values
/// row-major into `out`, whose capacity is `out_len`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn lmc_encoder_embed(
    enc: *const LmcEncoder,
    rgb: *const u8,
    n_images: usize,
    out: *mut f64,
    out_len: usize,
) -> LmcStatus {
    guard(|| {
        let enc = &*non_null(enc, "encoder")?;
        let cfg = enc.params.config();
        let side = cfg.input_side;
        let per = side * side * 3;
        let need = n_images * cfg.output_dim();
        if out_len < need {
            return Err(Error::InvalidArgument(format!("output holds {out_len} values, need {need}")).into());
        }
        let data = slice(rgb, n_images * per, "rgb")?;
        let images = data
            .chunks(per)
            .map(|c| patch_from(c, side, side))
            .collect::<Result<Vec<_>, _>>()?;
        let emb = forward(&enc.params, &images)?;
        slice_mut(out, need, "out")?.copy_from_slice(emb.values());
        Ok(())
    })
}

/// Estimates the hematoxylin and eosin OD vectors of an interleaved RGB
/// image; each output holds 3 values.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes; outputs must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn lmc_estimate_stain_basis(
    rgb: *const u8,
    width: usize,
    height: usize,
    out_h: *mut f64,
    out_e: *mut f64,
) -> LmcStatus {
    guard(|| {
        let patch = patch_from(slice(rgb, width * height * 3, "rgb")?, width, height)?;
        let basis = estimate_stain_basis_rgb(&patch, &StainEstimationConfig::default())?;
        slice_mut(out_h, 3, "out_h")?.copy_from_slice(&basis.h());
        slice_mut(out_e, 3, "out_e")?.copy_from_slice(&basis.e());
        Ok(())
    })
}

/// Rescales H and E concentrations of an interleaved RGB image into `out`
/// (same size). `basis_h`/`basis_e` give unit OD vectors; pass both null to
/// estimate the basis from the image.
///
/// # Safety
/// Image buffers must hold `width * height * 3` bytes; basis pointers, when
/// non-null, 3 values each.
#[no_mangle]
pub unsafe extern "C" fn lmc_augment_rgb(
    rgb: *const u8,
    width: usize,
    height: usize,
    basis_h: *const f64,
    basis_e: *const f64,
    alpha_h: f64,
    alpha_e: f64,
    out: *mut u8,
) -> LmcStatus {
    guard(|| {
        let n = width * height * 3;
        let patch = patch_from(slice(rgb, n, "rgb")?, width, height)?;
        let basis = match (basis_h.is_null(), basis_e.is_null()) {
            (true, true) => estimate_stain_basis_rgb(&patch, &StainEstimationConfig::default())?,
            (false, false) => {
                let h = slice(basis_h, 3, "basis_h")?;
                let e = slice(basis_e, 3, "basis_e")?;
                StainBasis::new([h[0], h[1], h[2]], [e[0], e[1], e[2]])?
            }
            _ => return Err(Error::InvalidArgument("pass both basis vectors or neither".into()).into()),
        };
        let img = augment(&patch, &basis, alpha_h, alpha_e, lmc::stain_math::DEFAULT_BACKGROUND)?;
        let dst = slice_mut(out, n, "out")?;
        for (d, p) in dst.chunks_mut(3).zip(img.pixels()) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Compaction loss between two row-major `batch x dim` embedding batches.
///
/// # Safety
/// `z1` and `z2` must hold `batch * dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmc_loss(
    z1: *const f64,
    z2: *const f64,
    batch: usize,
    dim: usize,
    lambda: f64,
    out: *mut LmcLossBreakdown,
) -> LmcStatus {
    guard(|| {
        non_null(out, "out")?;
        let a = EmbeddingBatch::new(batch, dim, slice(z1, batch * dim, "z1")?.to_vec())?;
        let b = EmbeddingBatch::new(batch, dim, slice(z2, batch * dim, "z2")?.to_vec())?;
        let br = loss_of(&cross_correlation(&a, &b)?, lambda)?;
        *out = LmcLossBreakdown {
            invariance: br.invariance,
            redundancy: br.redundancy,
            lambda: br.lambda,
            total: br.total,
        };
        Ok(())
    })
}

/// Gaussian W2 between two row-major sample sets of width `dim`.
///
/// # Safety
/// `a` must hold `n_a * dim` values, `b` `n_b * dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmc_w2_distance(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    out: *mut f64,
) -> LmcStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be positive".into()).into());
        }
        let ga = fit_gaussian(&rows_from(slice(a, n_a * dim, "a")?, n_a, dim)?)?;
        let gb = fit_gaussian(&rows_from(slice(b, n_b * dim, "b")?, n_b, dim)?)?;
        *out = w2_gaussian(&ga, &gb)?;
        Ok(())
    })
}
