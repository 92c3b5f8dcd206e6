//! C ABI over `cdis-core`.
//!
//! Conventions:
//! - Every fallible function returns a [`CdisStatus`]; results go through
//!   out-pointers.
//! - On failure, [`cdis_last_error_message`] and [`cdis_last_error_tag`]
//!   describe the most recent error on the calling thread.
//! - Objects are opaque handles released with their `_free` function.
//! - Panics never cross the boundary; they surface as `CDIS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cdis_core::cdis::{calibrate, mix, CoefficientVector};
use cdis_core::cube::{read_cube, StandardCube};
use cdis_core::nifti::{read_nifti, write_nifti};
use cdis_core::roc::{auc_rank, classify_report, volume_auc};
use cdis_core::simplex::{try_minimize, NmConfig};
use cdis_core::volume::{Channel, DwiStack, MaskVolume, Provenance, Volume3D};
use cdis_core::Error;

/// Outcome of a call. Codes 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdisStatus {
    Ok = 0,
    /// Null pointer, bad length, or invalid UTF-8 path.
    InvalidArgument = 1,
    /// Configuration or contract violation.
    Validation = 2,
    /// Unreadable, truncated or malformed data.
    Data = 3,
    /// Undefined AUC or other numerical failure.
    Numerical = 4,
    Panic = 5,
}

struct LastError {
    tag: CString,
    message: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn cstring(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed")
}

fn set_error(tag: &str, message: &str) {
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = Some(LastError {
            tag: cstring(tag),
            message: cstring(message),
        })
    });
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

enum Failure {
    Core(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn arg(msg: impl Into<String>) -> Failure {
    Failure::Arg(msg.into())
}

fn status_of(e: &Error) -> CdisStatus {
    match e.exit_code() {
        2 => CdisStatus::Validation,
        3 => CdisStatus::Data,
        _ => CdisStatus::Numerical,
    }
}

/// Runs `f`, recording any error or panic for the calling thread.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> CdisStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdisStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.tag(), &e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Arg(m))) => {
            set_error("ffi.argument", &m);
            CdisStatus::InvalidArgument
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error("ffi.panic", &msg);
            CdisStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| arg(format!("{what} is null")))
}

unsafe fn path<'a>(p: *const c_char) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(arg("path is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg("path is not valid UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last error on this thread, or NULL. Valid until the next
/// call into the library from the same thread.
#[no_mangle]
pub extern "C" fn cdis_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |l| l.message.as_ptr()))
}

/// Dotted machine-readable tag of the last error on this thread, or NULL.
#[no_mangle]
pub extern "C" fn cdis_last_error_tag() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |l| l.tag.as_ptr()))
}

/// A 3-D scalar volume.
pub struct CdisVolume(Volume3D);

/// A fused, standardized multi-channel cube.
pub struct CdisCube(StandardCube);

/// Copies `dims[0]*dims[1]*dims[2]` values (x fastest) into a new volume.
///
/// # Safety
/// `dims` and `spacing` point to 3 values, `data` to the voxel count, `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f64,
    out_volume: *mut *mut CdisVolume,
) -> CdisStatus {
    guard(|| {
        let d = slice(dims, 3, "dims")?;
        let s = slice(spacing, 3, "spacing")?;
        let d = [d[0], d[1], d[2]];
        let n = d.iter().product();
        let values = slice(data, n, "data")?.to_vec();
        let v = Volume3D::new(d, [s[0], s[1], s[2]], values)?;
        *out(out_volume, "out_volume")? = Box::into_raw(Box::new(CdisVolume(v)));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out_volume` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_read_nifti(path_: *const c_char, out_volume: *mut *mut CdisVolume) -> CdisStatus {
    guard(|| {
        let v = read_nifti(path(path_)?)?;
        *out(out_volume, "out_volume")? = Box::into_raw(Box::new(CdisVolume(v)));
        Ok(())
    })
}

/// Writes little-endian float32 NIfTI-1.
///
/// # Safety
/// `volume` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_write_nifti(volume: *const CdisVolume, path_: *const c_char) -> CdisStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| arg("volume is null"))?;
        write_nifti(&v.0, path(path_)?)?;
        Ok(())
    })
}

/// # Safety
/// `volume` is a live handle; `dims` and `spacing` (either may be NULL)
/// have room for 3 values.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_shape(volume: *const CdisVolume, dims: *mut usize, spacing: *mut f64) -> CdisStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| arg("volume is null"))?;
        if !dims.is_null() {
            slice_mut(dims, 3, "dims")?.copy_from_slice(&v.0.dims());
        }
        if !spacing.is_null() {
            slice_mut(spacing, 3, "spacing")?.copy_from_slice(&v.0.spacing());
        }
        Ok(())
    })
}

/// Number of voxels, or 0 for NULL.
///
/// # Safety
/// `volume` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_len(volume: *const CdisVolume) -> usize {
    volume.as_ref().map_or(0, |v| v.0.len())
}

/// Copies the voxels into `buf`, which must hold exactly the voxel count.
///
/// # Safety
/// `volume` is a live handle; `buf` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_copy_data(volume: *const CdisVolume, buf: *mut f64, len: usize) -> CdisStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| arg("volume is null"))?;
        if len != v.0.len() {
            return Err(arg(format!("buffer holds {len} values, volume has {}", v.0.len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(v.0.data());
        Ok(())
    })
}

/// # Safety
/// `volume` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_free(volume: *mut CdisVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Reads a cube file; the patient id is taken from the file stem.
///
/// # Safety
/// `path` is a NUL-terminated string; `out_cube` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_cube_read(path_: *const c_char, out_cube: *mut *mut CdisCube) -> CdisStatus {
    guard(|| {
        let c = read_cube(path(path_)?)?;
        *out(out_cube, "out_cube")? = Box::into_raw(Box::new(CdisCube(c)));
        Ok(())
    })
}

/// # Safety
/// `cube` is a live handle; `dims` has room for 3 values; `n_channels` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_cube_shape(cube: *const CdisCube, dims: *mut usize, n_channels: *mut usize) -> CdisStatus {
    guard(|| {
        let c = cube.as_ref().ok_or_else(|| arg("cube is null"))?;
        slice_mut(dims, 3, "dims")?.copy_from_slice(&c.0.dims());
        *out(n_channels, "n_channels")? = c.0.n_channels();
        Ok(())
    })
}

/// Copies channel `index` into `buf` (exactly the voxel count).
///
/// # Safety
/// `cube` is a live handle; `buf` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdis_cube_copy_channel(cube: *const CdisCube, index: usize, buf: *mut f64, len: usize) -> CdisStatus {
    guard(|| {
        let c = cube.as_ref().ok_or_else(|| arg("cube is null"))?;
        if index >= c.0.n_channels() {
            return Err(arg(format!("channel {index} of {}", c.0.n_channels())));
        }
        let data = c.0.channel_data(index);
        if len != data.len() {
            return Err(arg(format!("buffer holds {len} values, channel has {}", data.len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(data);
        Ok(())
    })
}

/// # Safety
/// `cube` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdis_cube_free(cube: *mut CdisCube) {
    if !cube.is_null() {
        drop(Box::from_raw(cube));
    }
}

/// Rank-based (Mann-Whitney) AUC with midranks for ties. Labels are 0/1.
///
/// # Safety
/// `scores` and `labels` hold `n` values; `out_auc` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_auc_rank(scores: *const f64, labels: *const u8, n: usize, out_auc: *mut f64) -> CdisStatus {
    guard(|| {
        let r = auc_rank(slice(scores, n, "scores")?, slice(labels, n, "labels")?)?;
        *out(out_auc, "out_auc")? = r.auc;
        Ok(())
    })
}

/// Voxelwise AUC of `scores` against a binary `mask` volume.
///
/// # Safety
/// Both handles are live; `out_auc` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_volume_auc(scores: *const CdisVolume, mask: *const CdisVolume, out_auc: *mut f64) -> CdisStatus {
    guard(|| {
        let s = scores.as_ref().ok_or_else(|| arg("scores is null"))?;
        let m = mask.as_ref().ok_or_else(|| arg("mask is null"))?;
        let m = MaskVolume::from_volume(&m.0)?;
        *out(out_auc, "out_auc")? = volume_auc(&s.0, &m)?.auc;
        Ok(())
    })
}

/// Confusion counts and rates. Undefined rates are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CdisClassification {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// # Safety
/// `predictions` and `labels` hold `n` values; `out_report` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_classify(
    predictions: *const u8,
    labels: *const u8,
    n: usize,
    positive_class: u8,
    out_report: *mut CdisClassification,
) -> CdisStatus {
    guard(|| {
        let r = classify_report(slice(predictions, n, "predictions")?, slice(labels, n, "labels")?, positive_class)?;
        *out(out_report, "out_report")? = CdisClassification {
            tp: r.tp,
            fp: r.fp,
            tn: r.tn,
            fn_: r.fn_,
            accuracy: r.accuracy,
            sensitivity: r.sensitivity.unwrap_or(f64::NAN),
            specificity: r.specificity.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Mixes `n_channels` signal arrays of `n_voxels` each (channel-major,
/// ascending b) as `exp(sum rho_i ln max(S_i, eps))`, then maps the
/// `p_lo`/`p_hi` percentiles onto [0, 1]. `eps <= 0` selects
/// `1e-6 * max signal`. Writes `n_voxels` values to `out`.
///
/// # Safety
/// `channels` holds `n_channels * n_voxels` values; `bvalues` and `rho`
/// hold `n_channels`; `out` has room for `n_voxels`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cdis_mix_calibrate(
    channels: *const f64,
    bvalues: *const f64,
    rho: *const f64,
    n_channels: usize,
    n_voxels: usize,
    eps: f64,
    p_lo: f64,
    p_hi: f64,
    out_signal: *mut f64,
) -> CdisStatus {
    guard(|| {
        if n_channels == 0 || n_voxels == 0 {
            return Err(arg("need at least one channel and one voxel"));
        }
        let total = n_channels.checked_mul(n_voxels).ok_or_else(|| arg("size overflow"))?;
        let data = slice(channels, total, "channels")?;
        let bs = slice(bvalues, n_channels, "bvalues")?;
        let rho = slice(rho, n_channels, "rho")?;
        let chans = data
            .chunks_exact(n_voxels)
            .zip(bs)
            .map(|(c, &b)| {
                Ok(Channel {
                    bvalue: b,
                    provenance: Provenance::Native,
                    volume: Volume3D::new([n_voxels, 1, 1], [1.0; 3], c.to_vec())?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let stack = DwiStack::new("ffi", chans)?;
        let coeffs = CoefficientVector::for_stack(&stack, rho.to_vec())?;
        let eps = if eps > 0.0 { eps } else { cdis_core::cdis::default_eps(&stack) };
        let raw = mix(&stack, &coeffs, eps)?;
        let (cal, _) = calibrate(&raw, p_lo, p_hi)?;
        slice_mut(out_signal, n_voxels, "out")?.copy_from_slice(cal.data());
        Ok(())
    })
}

/// Nelder-Mead settings. `max_iter == 0` means `500 * n`; `max_evals == 0`
/// means unlimited.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CdisNmOptions {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub delta: f64,
    pub init_step: f64,
    pub tol_f: f64,
    pub tol_x: f64,
    pub max_iter: usize,
    pub max_evals: usize,
}

impl Default for CdisNmOptions {
    fn default() -> Self {
        let d = NmConfig::default();
        Self {
            alpha: d.alpha,
            gamma: d.gamma,
            beta: d.beta,
            delta: d.delta,
            init_step: d.init_step[0],
            tol_f: d.tol_f,
            tol_x: d.tol_x,
            max_iter: 0,
            max_evals: 0,
        }
    }
}

/// # Safety
/// `out_options` is writable.
#[no_mangle]
pub unsafe extern "C" fn cdis_nm_options_default(out_options: *mut CdisNmOptions) -> CdisStatus {
    guard(|| {
        *out(out_options, "out_options")? = CdisNmOptions::default();
        Ok(())
    })
}

/// Objective callback: returns f(x) for `n` coordinates.
pub type CdisObjective = Option<unsafe extern "C" fn(x: *const f64, n: usize, user_data: *mut c_void) -> f64>;

/// Summary of a minimization.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CdisNmSummary {
    pub f_best: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// 0 converged, 1 flat initial simplex, 2 iteration cap, 3 evaluation cap.
    pub stop_reason: u32,
}

/// Minimizes `f` from `x0`. `options` may be NULL for defaults; `lower` and
/// `upper` may both be NULL for an unbounded search. Writes the best point
/// to `x_out`.
///
/// # Safety
/// `x0`, `x_out`, and non-NULL `lower`/`upper` hold `n` values; `f` is
/// callable with `user_data`; `out_summary` is NULL or writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cdis_nelder_mead(
    f: CdisObjective,
    user_data: *mut c_void,
    x0: *const f64,
    n: usize,
    options: *const CdisNmOptions,
    lower: *const f64,
    upper: *const f64,
    x_out: *mut f64,
    out_summary: *mut CdisNmSummary,
) -> CdisStatus {
    guard(|| {
        let f = f.ok_or_else(|| arg("objective is null"))?;
        let x0 = slice(x0, n, "x0")?;
        let o = options.as_ref().copied().unwrap_or_default();
        let bounds = match (lower.is_null(), upper.is_null()) {
            (true, true) => None,
            (false, false) => {
                let (lo, hi) = (slice(lower, n, "lower")?, slice(upper, n, "upper")?);
                Some(lo.iter().copied().zip(hi.iter().copied()).collect())
            }
            _ => return Err(arg("lower and upper must both be set or both be NULL")),
        };
        let cfg = NmConfig {
            alpha: o.alpha,
            gamma: o.gamma,
            beta: o.beta,
            delta: o.delta,
            init_step: vec![o.init_step],
            tol_f: o.tol_f,
            tol_x: o.tol_x,
            max_iter: (o.max_iter > 0).then_some(o.max_iter),
            max_evals: (o.max_evals > 0).then_some(o.max_evals),
            bounds,
        };
        let r = try_minimize(|x| Ok(f(x.as_ptr(), x.len(), user_data)), x0, &cfg)?;
        slice_mut(x_out, n, "x_out")?.copy_from_slice(&r.x_best);
        if let Some(s) = out_summary.as_mut() {
            *s = CdisNmSummary {
                f_best: r.f_best,
                iterations: r.iterations(),
                evaluations: r.n_evals(),
                stop_reason: r.stop_reason as u32,
            };
        }
        Ok(())
    })
}
