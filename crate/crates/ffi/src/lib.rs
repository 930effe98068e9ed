//! C interface to `betafact`.
//!
//! Objects cross the boundary as opaque handles created by `bf_*_new`,
//! `bf_*_read`, `bf_fit` or `bf_phantom_generate` and released with the
//! matching `*_free`. Every fallible call returns a [`BfStatus`]; on failure
//! `bf_last_error` gives a message for the calling thread. Matrices are
//! exchanged as column-major `double` buffers (frames × voxels for data).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use betafact::cli::{prepare_run, InitOverrides, SolvePlan, DEFAULT_B_SCALE};
use betafact::divergence::{d_beta, divergence};
use betafact::init::{InitMethod, DEFAULT_KMEANS_ITERS};
use betafact::io::{read_matrix, write_matrix};
use betafact::metrics::{nmse, psnr};
use betafact::phantom::{generate, NoiseModel, Phantom, PhantomSpec};
use betafact::solvers::{fit, FitResult, Termination};
use betafact::{Beta, DataMatrix, Error, ModelKind};
use ndarray::{Array2, ShapeBuilder};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Shape = 4,
    NonFinite = 5,
    Io = 6,
    Panic = 7,
}

/// Model family for [`BfFitOptions`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfModel {
    Nmf = 0,
    Lmm = 1,
    Slmm = 2,
}

/// Noise family for [`BfPhantomOptions`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfNoise {
    None = 0,
    Gaussian = 1,
    Poisson = 2,
    Gamma = 3,
    PoissonGaussian = 4,
}

/// Dense matrix of doubles.
pub struct BfMatrix {
    inner: Array2<f64>,
}

/// Result of a fit.
pub struct BfFit {
    result: FitResult,
}

/// Synthetic phantom with its ground truth.
pub struct BfPhantom {
    phantom: Phantom,
}

/// Fit settings. Start from `bf_fit_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BfFitOptions {
    pub model: BfModel,
    pub beta: f64,
    pub lambda: f64,
    /// Relative-decrease threshold; values <= 0 select the default.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Number of factors; ignored when an initial M is given.
    pub factors: usize,
    pub seed: u64,
    pub fix_factors: bool,
    pub use_xi: bool,
    /// -1 default (on for SLMM), 0 off, 1 on.
    pub pin_sbf: i32,
    /// Clamp data to at least this value when > 0.
    pub floor_data: f64,
}

/// Phantom settings. Start from `bf_phantom_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BfPhantomOptions {
    pub frames: usize,
    pub voxels: usize,
    pub factors: usize,
    pub variability_rank: usize,
    pub model: BfModel,
    pub noise: BfNoise,
    pub sigma: f64,
    pub scale: f64,
    pub shape: f64,
    pub seed: u64,
    /// Noise seed; negative reuses `seed`.
    pub noise_seed: i64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> BfStatus {
    match err {
        Error::Domain(_) => BfStatus::Domain,
        Error::Shape { .. } => BfStatus::Shape,
        Error::InvalidArgument(_) => BfStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::CollapsedColumn { .. } => BfStatus::NonFinite,
        Error::Format { .. } | Error::Io(_) => BfStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BfStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            BfStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            BfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

fn matrix_handle(a: Array2<f64>) -> *mut BfMatrix {
    into_handle(BfMatrix { inner: a })
}

fn model_kind(m: BfModel) -> ModelKind {
    match m {
        BfModel::Nmf => ModelKind::Nmf,
        BfModel::Lmm => ModelKind::Lmm,
        BfModel::Slmm => ModelKind::Slmm,
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn bf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates a `rows × cols` matrix from a column-major buffer of
/// `rows * cols` doubles, or zeros when `data` is null.
///
/// # Safety
/// `data` must be null or point to `rows * cols` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut BfMatrix,
) -> BfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let len = rows.checked_mul(cols).ok_or_else(|| Error::InvalidArgument("matrix size overflows".into()))?;
        let a = if data.is_null() {
            Array2::zeros((rows, cols))
        } else {
            let v = std::slice::from_raw_parts(data, len).to_vec();
            Array2::from_shape_vec((rows, cols).f(), v).map_err(|e| Error::InvalidArgument(e.to_string()))?
        };
        *out = matrix_handle(a);
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_free(m: *mut BfMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_rows(m: *const BfMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.nrows())
}

/// Number of columns, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_cols(m: *const BfMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.ncols())
}

/// Copies the matrix into `buf` in column-major order. `len` must equal
/// `rows * cols`.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_copy(m: *const BfMatrix, buf: *mut f64, len: usize) -> BfStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let a = &m.inner;
        if len != a.len() {
            return Err(Error::InvalidArgument(format!("buffer holds {len} values, matrix has {}", a.len())).into());
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (d, s) in dst.iter_mut().zip(a.t().iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Reads a `.bfmat` or CSV matrix file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_read(path: *const c_char, out: *mut *mut BfMatrix) -> BfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let a = read_matrix(&path_arg(path)?)?;
        *out = matrix_handle(a);
        Ok(())
    })
}

/// Writes a `.bfmat` file.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_write(m: *const BfMatrix, path: *const c_char) -> BfStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        write_matrix(&path_arg(path)?, &m.inner)?;
        Ok(())
    })
}

/// Scalar beta-divergence `d(y | x)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_d_beta(y: f64, x: f64, beta: f64, out: *mut f64) -> BfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = d_beta(y, x, Beta::new(beta)?)?;
        Ok(())
    })
}

/// Summed beta-divergence between two matrices of equal shape.
///
/// # Safety
/// `y` and `x` must be live handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_divergence(y: *const BfMatrix, x: *const BfMatrix, beta: f64, out: *mut f64) -> BfStatus {
    guard(|| {
        let (y, x, out) = (deref(y, "y")?, deref(x, "x")?, out_ptr(out, "out")?);
        *out = divergence(y.inner.view(), x.inner.view(), Beta::new(beta)?)?;
        Ok(())
    })
}

/// PSNR in dB of `hat` against `star`; `INFINITY` on exact recovery.
///
/// # Safety
/// Handles must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_psnr(hat: *const BfMatrix, star: *const BfMatrix, out: *mut f64) -> BfStatus {
    guard(|| {
        let (h, s, out) = (deref(hat, "hat")?, deref(star, "star")?, out_ptr(out, "out")?);
        *out = psnr(h.inner.view(), s.inner.view())?;
        Ok(())
    })
}

/// Normalized mean squared error of `hat` against `star`.
///
/// # Safety
/// Handles must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_nmse(hat: *const BfMatrix, star: *const BfMatrix, out: *mut f64) -> BfStatus {
    guard(|| {
        let (h, s, out) = (deref(hat, "hat")?, deref(star, "star")?, out_ptr(out, "out")?);
        *out = nmse(h.inner.view(), s.inner.view())?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn bf_fit_options_default() -> BfFitOptions {
    BfFitOptions {
        model: BfModel::Nmf,
        beta: 1.0,
        lambda: 0.0,
        epsilon: 0.0,
        max_iter: betafact::solvers::DEFAULT_MAX_ITER,
        factors: 0,
        seed: 0,
        fix_factors: false,
        use_xi: false,
        pin_sbf: -1,
        floor_data: 0.0,
    }
}

/// Fits a model to `y` (frames × voxels). `v` is required for SLMM.
/// `m_init` is optional; without it the factors start from k-means.
///
/// # Safety
/// `y` and `opts` must be valid; `v` and `m_init` may be null; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn bf_fit(
    y: *const BfMatrix,
    v: *const BfMatrix,
    m_init: *const BfMatrix,
    opts: *const BfFitOptions,
    out: *mut *mut BfFit,
) -> BfStatus {
    guard(|| {
        let y = deref(y, "y")?;
        let o = *deref(opts, "opts")?;
        let out = out_ptr(out, "out")?;
        let model = model_kind(o.model);
        let plan = SolvePlan {
            model,
            lambda: Some(o.lambda),
            preset: None,
            epsilon: (o.epsilon > 0.0).then_some(o.epsilon),
            max_iter: o.max_iter,
            factors: (o.factors > 0).then_some(o.factors),
            init: InitMethod::KMeans,
            m_init: None,
            a_init: None,
            b_init: None,
            v: None,
            fix_factors: o.fix_factors,
            pin_sbf: match o.pin_sbf {
                0 => Some(false),
                1 => Some(true),
                _ => None,
            },
            floor_data: (o.floor_data > 0.0).then_some(o.floor_data),
            use_xi: o.use_xi,
            b_scale: DEFAULT_B_SCALE,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        };
        let overrides =
            InitOverrides { m: m_init.as_ref().map(|m| m.inner.clone()), v: v.as_ref().map(|v| v.inner.clone()) };
        let data = DataMatrix::new(y.inner.clone())?;
        let (data, spec, cfg, theta0) = prepare_run(&plan, data, Beta::new(o.beta)?, o.seed, &overrides)?;
        let result = fit(&data, &spec, &theta0, &cfg)?;
        *out = into_handle(BfFit { result });
        Ok(())
    })
}

/// # Safety
/// `f` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_fit_free(f: *mut BfFit) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Iterations run, or 0 for a null handle.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_fit_iterations(f: *const BfFit) -> usize {
    f.as_ref().map_or(0, |f| f.result.iterations)
}

/// True when the stopping rule fired before the iteration cap.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_fit_converged(f: *const BfFit) -> bool {
    f.as_ref().is_some_and(|f| f.result.termination == Termination::Converged)
}

/// Final objective value, or NaN for a null handle.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bf_fit_objective(f: *const BfFit) -> f64 {
    f.as_ref().and_then(|f| f.result.objective_trace.last().copied()).unwrap_or(f64::NAN)
}

/// Copies `min(len, iterations + 1)` objective values into `buf` and returns
/// the full trace length.
///
/// # Safety
/// `buf` must point to `len` writable doubles (or be null with `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn bf_fit_trace(f: *const BfFit, buf: *mut f64, len: usize) -> usize {
    let Some(f) = f.as_ref() else { return 0 };
    let trace = &f.result.objective_trace;
    if !buf.is_null() {
        let n = len.min(trace.len());
        std::slice::from_raw_parts_mut(buf, n).copy_from_slice(&trace[..n]);
    }
    trace.len()
}

/// Fitted factors M (frames × K) as a new matrix handle.
///
/// # Safety
/// `f` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_fit_factors(f: *const BfFit, out: *mut *mut BfMatrix) -> BfStatus {
    guard(|| {
        let f = deref(f, "fit")?;
        *out_ptr(out, "out")? = matrix_handle(f.result.theta.m().clone());
        Ok(())
    })
}

/// Fitted proportions A (K × voxels) as a new matrix handle.
///
/// # Safety
/// `f` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_fit_proportions(f: *const BfFit, out: *mut *mut BfMatrix) -> BfStatus {
    guard(|| {
        let f = deref(f, "fit")?;
        *out_ptr(out, "out")? = matrix_handle(f.result.theta.a().clone());
        Ok(())
    })
}

/// Fitted internal variabilities B (N_v × voxels). Sets `*out` to null for
/// models without B.
///
/// # Safety
/// `f` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_fit_variability(f: *const BfFit, out: *mut *mut BfMatrix) -> BfStatus {
    guard(|| {
        let f = deref(f, "fit")?;
        *out_ptr(out, "out")? = f.result.theta.b().map_or(ptr::null_mut(), |b| matrix_handle(b.clone()));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn bf_phantom_options_default() -> BfPhantomOptions {
    let d = PhantomSpec::default();
    BfPhantomOptions {
        frames: d.frames,
        voxels: d.voxels,
        factors: d.factors,
        variability_rank: d.variability_rank,
        model: BfModel::Slmm,
        noise: BfNoise::None,
        sigma: 0.0,
        scale: 0.0,
        shape: 0.0,
        seed: 0,
        noise_seed: -1,
    }
}

/// Generates a synthetic phantom.
///
/// # Safety
/// `opts` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_phantom_generate(opts: *const BfPhantomOptions, out: *mut *mut BfPhantom) -> BfStatus {
    guard(|| {
        let o = *deref(opts, "opts")?;
        let out = out_ptr(out, "out")?;
        let noise = match o.noise {
            BfNoise::None => NoiseModel::Gaussian { sigma: 0.0 },
            BfNoise::Gaussian => NoiseModel::Gaussian { sigma: o.sigma },
            BfNoise::Poisson => NoiseModel::Poisson { scale: o.scale },
            BfNoise::Gamma => NoiseModel::Gamma { shape: o.shape },
            BfNoise::PoissonGaussian => NoiseModel::PoissonGaussian { scale: o.scale, sigma: o.sigma },
        };
        let spec = PhantomSpec {
            frames: o.frames,
            voxels: o.voxels,
            factors: o.factors,
            variability_rank: o.variability_rank,
            kind: model_kind(o.model),
            noise,
            seed: o.seed,
            noise_seed: u64::try_from(o.noise_seed).ok(),
        };
        *out = into_handle(BfPhantom { phantom: generate(&spec)? });
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bf_phantom_free(p: *mut BfPhantom) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Which phantom array `bf_phantom_get` returns.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfPhantomPart {
    /// Noisy data Y.
    Data = 0,
    /// Noiseless image X.
    Clean = 1,
    Factors = 2,
    Proportions = 3,
    /// Variability basis V (SLMM only).
    Basis = 4,
    /// Internal variabilities B (SLMM only).
    Variability = 5,
}

/// Copies one phantom array into a new matrix handle. Sets `*out` to null
/// when the part does not exist for the phantom's model.
///
/// # Safety
/// `p` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bf_phantom_get(p: *const BfPhantom, part: BfPhantomPart, out: *mut *mut BfMatrix) -> BfStatus {
    guard(|| {
        let p = &deref(p, "phantom")?.phantom;
        let out = out_ptr(out, "out")?;
        let a = match part {
            BfPhantomPart::Data => Some(p.data.values()),
            BfPhantomPart::Clean => Some(&p.truth.x),
            BfPhantomPart::Factors => Some(&p.truth.m),
            BfPhantomPart::Proportions => Some(&p.truth.a),
            BfPhantomPart::Basis => p.truth.v.as_ref(),
            BfPhantomPart::Variability => p.truth.b.as_ref(),
        };
        *out = a.map_or(ptr::null_mut(), |a| matrix_handle(a.clone()));
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_follow_the_core_error() {
        assert_eq!(status_of(&Error::Domain("x".into())), BfStatus::Domain);
        assert_eq!(status_of(&Error::CollapsedColumn { voxel: 0 }), BfStatus::NonFinite);
        assert_eq!(status_of(&Error::InvalidArgument("x".into())), BfStatus::InvalidArgument);
    }

    #[test]
    fn panics_are_contained() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, BfStatus::Panic);
        let msg = unsafe { CStr::from_ptr(bf_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "internal panic");
        assert_eq!(guard(|| Ok(())), BfStatus::Ok);
        assert!(bf_last_error().is_null());
    }
}
