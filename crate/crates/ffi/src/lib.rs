//! C ABI over the splatwave runtime: load a fitted bundle, predict coefficients from a
//! motion descriptor and decode full-resolution attribute textures.
//!
//! Every fallible call returns an [`SwStatus`]; on failure the message is available
//! from [`sw_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use splatwave::bench::{count_cost, ModelConfig};
use splatwave::blendshape::CoefficientSet;
use splatwave::pipeline::Bundle;
use splatwave::sh::{eval_color, Sh1Coefficients, TexelRotation, SH_COEFFS};
use splatwave::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Shape = 4,
    Numerical = 5,
    Panic = 6,
}

/// Opaque handle to a loaded model bundle.
pub struct SwBundle {
    inner: Bundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> SwStatus {
    match err {
        Error::Io { .. } | Error::Manifest { .. } | Error::BlobSize { .. } => SwStatus::Io,
        Error::Shape(_) | Error::UnknownGroup(_) => SwStatus::Shape,
        e if e.is_numerical() => SwStatus::Numerical,
        Error::NonFinite(_) => SwStatus::Numerical,
        _ => SwStatus::InvalidArgument,
    }
}

fn fail(status: SwStatus, msg: impl Into<String>) -> SwStatus {
    set_last_error(msg);
    status
}

/// Runs `f`, recording its error and turning panics into [`SwStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), SwStatus>) -> SwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SwStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(SwStatus::Panic, "internal panic"),
    }
}

fn check<T>(r: splatwave::Result<T>) -> Result<T, SwStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SwStatus> {
    if p.is_null() {
        Err(fail(SwStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Borrows `len` elements; a zero length accepts a null pointer.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], SwStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], SwStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn bundle<'a>(b: *const SwBundle) -> Result<&'a Bundle, SwStatus> {
    non_null(b, "bundle")?;
    Ok(&(*b).inner)
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), SwStatus> {
    if got == want {
        Ok(())
    } else {
        Err(fail(SwStatus::Shape, format!("{what} has {got} elements, expected {want}")))
    }
}

fn texel_count(b: &Bundle) -> usize {
    let (h, w) = b.models[0].resolution;
    h * w * b.models.iter().map(|m| m.channels()).sum::<usize>()
}

fn write_texture(b: &Bundle, coeffs: &[CoefficientSet], out: &mut [f32]) -> Result<(), SwStatus> {
    let tex = check(b.reconstruct(coeffs))?;
    out.copy_from_slice(tex.data());
    Ok(())
}

fn split_flat(b: &Bundle, flat: &[f64]) -> Result<Vec<CoefficientSet>, SwStatus> {
    let mut off = 0;
    b.models
        .iter()
        .map(|m| {
            let n = m.coefficient_count();
            let set = check(m.coefficients_from_flat(&flat[off..off + n]));
            off += n;
            set
        })
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn sw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a bundle directory. On success `*out` owns a handle for [`sw_bundle_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_load(path: *const c_char, out: *mut *mut SwBundle) -> SwStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| fail(SwStatus::InvalidArgument, "path is not UTF-8"))?;
        let inner = check(Bundle::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(SwBundle { inner }));
        Ok(())
    })
}

/// Releases a handle from [`sw_bundle_load`]. Null is ignored.
///
/// # Safety
/// `b` must come from [`sw_bundle_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_free(b: *mut SwBundle) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Texture height, width and channel count produced by the bundle.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_shape(
    b: *const SwBundle,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> SwStatus {
    guard(|| {
        let b = bundle(b)?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        non_null(channels, "channels")?;
        let (h, w) = b.models[0].resolution;
        *height = h;
        *width = w;
        *channels = b.models.iter().map(|m| m.channels()).sum();
        Ok(())
    })
}

/// Width of the motion descriptor the predictors expect.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_descriptor_width(b: *const SwBundle, width: *mut usize) -> SwStatus {
    guard(|| {
        let b = bundle(b)?;
        non_null(width, "width")?;
        *width = b.mlps[0].input_width();
        Ok(())
    })
}

/// Total coefficients per frame, all models concatenated.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_coefficient_count(b: *const SwBundle, count: *mut usize) -> SwStatus {
    guard(|| {
        let b = bundle(b)?;
        non_null(count, "count")?;
        *count = b.models.iter().map(|m| m.coefficient_count()).sum();
        Ok(())
    })
}

/// Predicts coefficients for one descriptor into `coeffs` (`coeff_len` must equal the count).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_predict(
    b: *const SwBundle,
    descriptor: *const f64,
    descriptor_len: usize,
    coeffs: *mut f64,
    coeff_len: usize,
) -> SwStatus {
    guard(|| {
        let b = bundle(b)?;
        let x = slice(descriptor, descriptor_len, "descriptor")?;
        expect_len(descriptor_len, b.mlps[0].input_width(), "descriptor")?;
        let out = slice_mut(coeffs, coeff_len, "coeffs")?;
        let flat: Vec<f64> = check(b.predict(x))?.iter().flat_map(|c| c.to_flat()).collect();
        expect_len(coeff_len, flat.len(), "coefficient buffer")?;
        out.copy_from_slice(&flat);
        Ok(())
    })
}

/// Decodes a texture (row-major, channels innermost) from explicit coefficients.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_reconstruct(
    b: *const SwBundle,
    coeffs: *const f64,
    coeff_len: usize,
    texture: *mut f32,
    texture_len: usize,
) -> SwStatus {
    guard(|| {
        let b = bundle(b)?;
        let need: usize = b.models.iter().map(|m| m.coefficient_count()).sum();
        expect_len(coeff_len, need, "coefficients")?;
        let flat = slice(coeffs, coeff_len, "coeffs")?;
        expect_len(texture_len, texel_count(b), "texture buffer")?;
        let out = slice_mut(texture, texture_len, "texture")?;
        write_texture(b, &split_flat(b, flat)?, out)
    })
}

/// Runtime path: descriptor to texture in one call.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sw_bundle_evaluate(
    b: *const SwBundle,
    descriptor: *const f64,
    descriptor_len: usize,
    texture: *mut f32,
    texture_len: usize,
) -> SwStatus {
    guard(|| {
        let b = bundle(b)?;
        let x = slice(descriptor, descriptor_len, "descriptor")?;
        expect_len(descriptor_len, b.mlps[0].input_width(), "descriptor")?;
        expect_len(texture_len, texel_count(b), "texture buffer")?;
        let out = slice_mut(texture, texture_len, "texture")?;
        write_texture(b, &check(b.predict(x))?, out)
    })
}

/// Parameters and FLOPs per frame of the `paper` rank preset at 768x768.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sw_cost_paper(params: *mut u64, flops: *mut u64) -> SwStatus {
    guard(|| {
        non_null(params, "params")?;
        non_null(flops, "flops")?;
        let report = check(count_cost(&ModelConfig::paper()))?;
        *params = report.total_params();
        *flops = report.total_flops();
        Ok(())
    })
}

/// RGB of canonical degree-1 SH coefficients (12, colour-major) seen along unit
/// direction `dir` under the row-major texel rotation `rotation` (null for identity).
///
/// # Safety
/// `eta` must hold 12 values, `dir` and `rgb` 3, `rotation` 9 when non-null.
#[no_mangle]
pub unsafe extern "C" fn sw_sh_eval_color(
    eta: *const f32,
    rotation: *const f64,
    dir: *const f64,
    rgb: *mut f64,
) -> SwStatus {
    guard(|| {
        let eta = check(Sh1Coefficients::from_f32(slice(eta, SH_COEFFS, "eta")?))?;
        let d = slice(dir, 3, "dir")?;
        let out = slice_mut(rgb, 3, "rgb")?;
        let r = if rotation.is_null() {
            TexelRotation::identity()
        } else {
            check(TexelRotation::new(Matrix3::from_row_slice(slice(rotation, 9, "rotation")?)))?
        };
        let c = check(eval_color(&eta, &r, &Vector3::new(d[0], d[1], d[2])))?;
        out.copy_from_slice(&c);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_are_stable() {
        assert_eq!(SwStatus::Ok as i32, 0);
        assert_eq!(SwStatus::Panic as i32, 6);
        assert_eq!(status_of(&Error::Shape("x".into())), SwStatus::Shape);
        assert_eq!(status_of(&Error::Numerical("x".into())), SwStatus::Numerical);
        assert_eq!(status_of(&Error::Config("x".into())), SwStatus::InvalidArgument);
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), SwStatus::Panic);
        assert!(!sw_last_error_message().is_null());
        assert_eq!(guard(|| Ok(())), SwStatus::Ok);
        assert!(sw_last_error_message().is_null());
    }
}
