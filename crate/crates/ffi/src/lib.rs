//! C interface to `latent-abcss`.
//!
//! Objects cross the boundary as opaque handles created by a `*_new` or
//! `*_load` function and released with the matching `*_free`. Every fallible
//! call returns a [`LabcssStatus`]; on failure the message is available from
//! [`labcss_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use latent_abcss::gp::Grid;
use latent_abcss::jgnn::JGNNModel;
use latent_abcss::linalg::DenseMatrix;
use latent_abcss::pipeline::{self, PipelineConfig};
use latent_abcss::rng::RngStream;
use latent_abcss::tomography::{assemble_matrix, build_geometry, GeometryConfig, RayMatrix};
use latent_abcss::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabcssStatus {
    Ok = 0,
    NullPointer = 1,
    /// Invalid configuration, dimensions, paths or file contents.
    InvalidInput = 2,
    /// Numerical failure: non-finite values, factorization failure, divergence.
    Numeric = 3,
    /// The threshold curve had no curvature peak; diagnostics are still
    /// available from the inversion handle.
    NoCurvaturePeak = 4,
    Panic = 5,
}

impl From<&Error> for LabcssStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => LabcssStatus::InvalidInput,
            4 => LabcssStatus::NoCurvaturePeak,
            _ => LabcssStatus::Numeric,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: Error) -> LabcssStatus {
    let status = LabcssStatus::from(&e);
    set_error(e.to_string());
    status
}

fn null_arg(name: &str) -> LabcssStatus {
    set_error(format!("{name} is null"));
    LabcssStatus::NullPointer
}

fn guard<F: FnOnce() -> LabcssStatus>(f: F) -> LabcssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LabcssStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, LabcssStatus> {
    if p.is_null() {
        return Err(null_arg(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        LabcssStatus::InvalidInput
    })
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn labcss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn labcss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trained generative model.
pub struct LabcssModel(JGNNModel);

/// Straight-ray travel-time operator.
pub struct LabcssRayMatrix(RayMatrix);

/// Result of one inversion.
pub struct LabcssInversion(pipeline::Inversion);

/// Loads a model checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn labcss_model_load(path: *const c_char, out: *mut *mut LabcssModel) -> LabcssStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match JGNNModel::load(Path::new(path)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(LabcssModel(m)));
                LabcssStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `model` must come from [`labcss_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn labcss_model_free(model: *mut LabcssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the field, travel-time and latent dimensions.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn labcss_model_dims(
    model: *const LabcssModel,
    x_dim: *mut usize,
    y_dim: *mut usize,
    latent_dim: *mut usize,
) -> LabcssStatus {
    if model.is_null() || x_dim.is_null() || y_dim.is_null() || latent_dim.is_null() {
        return null_arg("argument");
    }
    let m = &(*model).0;
    *x_dim = m.x_dim();
    *y_dim = m.y_dim();
    *latent_dim = m.latent_dim();
    LabcssStatus::Ok
}

/// Maps `n` latent vectors (row-major, `n × latent_dim`) to fields
/// (`n × x_dim`) and travel times (`n × y_dim`). Either output may be null.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn labcss_model_generate(
    model: *const LabcssModel,
    z: *const f64,
    n: usize,
    x_out: *mut f64,
    y_out: *mut f64,
) -> LabcssStatus {
    guard(|| {
        if model.is_null() || z.is_null() {
            return null_arg("model or z");
        }
        let m = &(*model).0;
        let zs = std::slice::from_raw_parts(z, n * m.latent_dim()).to_vec();
        let zs = match DenseMatrix::new(n, m.latent_dim(), zs) {
            Ok(z) => z,
            Err(e) => return fail(e),
        };
        match m.generate(&zs) {
            Ok((x, y)) => {
                if !x_out.is_null() {
                    ptr::copy_nonoverlapping(x.data().as_ptr(), x_out, x.data().len());
                }
                if !y_out.is_null() {
                    ptr::copy_nonoverlapping(y.data().as_ptr(), y_out, y.data().len());
                }
                LabcssStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Builds the operator for a grid of `n_rows × n_cols` square cells of side
/// `cell_size` and two boreholes `separation` apart, with sources and
/// receivers evenly spaced between `depth_min` and `depth_max`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn labcss_ray_matrix_new(
    n_rows: usize,
    n_cols: usize,
    cell_size: f64,
    n_sources: usize,
    n_receivers: usize,
    depth_min: f64,
    depth_max: f64,
    separation: f64,
    out: *mut *mut LabcssRayMatrix,
) -> LabcssStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let grid = match Grid::new(n_rows, n_cols, cell_size) {
            Ok(g) => g,
            Err(e) => return fail(e),
        };
        let cfg = GeometryConfig {
            n_sources,
            n_receivers,
            depth_min,
            depth_max,
            separation,
        };
        match build_geometry(&grid, &cfg).and_then(|g| assemble_matrix(&grid, &g)) {
            Ok(a) => {
                *out = Box::into_raw(Box::new(LabcssRayMatrix(a)));
                LabcssStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads an operator saved under the array stem `stem`.
///
/// # Safety
/// `stem` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn labcss_ray_matrix_load(stem: *const c_char, out: *mut *mut LabcssRayMatrix) -> LabcssStatus {
    guard(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let stem = match str_arg(stem, "stem") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match RayMatrix::load(Path::new(stem)) {
            Ok(a) => {
                *out = Box::into_raw(Box::new(LabcssRayMatrix(a)));
                LabcssStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `a` must come from a `labcss_ray_matrix_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn labcss_ray_matrix_free(a: *mut LabcssRayMatrix) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn labcss_ray_matrix_dims(
    a: *const LabcssRayMatrix,
    n_rays: *mut usize,
    n_cells: *mut usize,
) -> LabcssStatus {
    if a.is_null() || n_rays.is_null() || n_cells.is_null() {
        return null_arg("argument");
    }
    *n_rays = (*a).0.n_rays;
    *n_cells = (*a).0.n_cells;
    LabcssStatus::Ok
}

/// Travel times `y = A x` for one slowness field.
///
/// # Safety
/// `x` must hold `n_cells` and `y` `n_rays` doubles.
#[no_mangle]
pub unsafe extern "C" fn labcss_ray_matrix_apply(a: *const LabcssRayMatrix, x: *const f64, y: *mut f64) -> LabcssStatus {
    guard(|| {
        if a.is_null() || x.is_null() || y.is_null() {
            return null_arg("argument");
        }
        let a = &(*a).0;
        match a.apply(std::slice::from_raw_parts(x, a.n_cells)) {
            Ok(v) => {
                ptr::copy_nonoverlapping(v.as_ptr(), y, v.len());
                LabcssStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Inverts one observation vector of length `n_obs`: deep Subset
/// Simulation run, threshold selection by curvature and a final run at the
/// selected threshold. `config_json` is a pipeline configuration in JSON
/// (null for the defaults); only its sampler, threshold grid and smoothing
/// settings are used.
///
/// On [`LabcssStatus::NoCurvaturePeak`] the handle is still written so the
/// threshold curve can be inspected.
///
/// # Safety
/// `y_obs` must hold `n_obs` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn labcss_invert(
    model: *const LabcssModel,
    a: *const LabcssRayMatrix,
    y_obs: *const f64,
    n_obs: usize,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut LabcssInversion,
) -> LabcssStatus {
    guard(|| {
        if model.is_null() || a.is_null() || y_obs.is_null() || out.is_null() {
            return null_arg("argument");
        }
        let cfg = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            let text = match str_arg(config_json, "config_json") {
                Ok(t) => t,
                Err(s) => return s,
            };
            match serde_json::from_str::<PipelineConfig>(text) {
                Ok(c) => c,
                Err(e) => return fail(Error::InvalidConfig(e.to_string())),
            }
        };
        let (m, a) = (&(*model).0, &(*a).0);
        if n_obs != a.n_rays || n_obs != m.y_dim() {
            return fail(Error::DimensionMismatch(format!(
                "{n_obs} observations for an operator with {} rays and a model with {} outputs",
                a.n_rays,
                m.y_dim()
            )));
        }
        let y = std::slice::from_raw_parts(y_obs, n_obs);
        match pipeline::invert(&cfg, m, a, y, None, RngStream::new(seed)) {
            Ok(inv) => {
                let peak = inv.selected_eps.is_some();
                *out = Box::into_raw(Box::new(LabcssInversion(inv)));
                if peak {
                    LabcssStatus::Ok
                } else {
                    fail(Error::NoCurvaturePeak)
                }
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `inv` must come from [`labcss_invert`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn labcss_inversion_free(inv: *mut LabcssInversion) {
    if !inv.is_null() {
        drop(Box::from_raw(inv));
    }
}

/// Selected threshold (squared ns) and the stagnation level in normalized
/// units (ns). `selected_eps` is set to NaN when no threshold was selected.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn labcss_inversion_thresholds(
    inv: *const LabcssInversion,
    selected_eps: *mut f64,
    stagnation_eps_n: *mut f64,
) -> LabcssStatus {
    if inv.is_null() || selected_eps.is_null() || stagnation_eps_n.is_null() {
        return null_arg("argument");
    }
    let inv = &(*inv).0;
    *selected_eps = inv.selected_eps.unwrap_or(f64::NAN);
    *stagnation_eps_n = inv.curve.stagnation_eps_n.unwrap_or(f64::NAN);
    LabcssStatus::Ok
}

/// Shape of the solution set; zero rows when no threshold was selected.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn labcss_inversion_solutions_shape(
    inv: *const LabcssInversion,
    rows: *mut usize,
    cols: *mut usize,
) -> LabcssStatus {
    if inv.is_null() || rows.is_null() || cols.is_null() {
        return null_arg("argument");
    }
    let (r, c) = (*inv).0.solutions.as_ref().map_or((0, 0), |s| s.shape());
    *rows = r;
    *cols = c;
    LabcssStatus::Ok
}

/// Copies the solution fields row-major into `buf` of `len` doubles.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn labcss_inversion_copy_solutions(
    inv: *const LabcssInversion,
    buf: *mut f64,
    len: usize,
) -> LabcssStatus {
    if inv.is_null() || buf.is_null() {
        return null_arg("argument");
    }
    let Some(s) = (*inv).0.solutions.as_ref() else {
        set_error("no solutions: no threshold was selected".into());
        return LabcssStatus::NoCurvaturePeak;
    };
    if len != s.data().len() {
        return fail(Error::DimensionMismatch(format!(
            "buffer of {len} for {} values",
            s.data().len()
        )));
    }
    ptr::copy_nonoverlapping(s.data().as_ptr(), buf, len);
    LabcssStatus::Ok
}
