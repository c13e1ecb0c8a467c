//! C ABI over the graysim engine.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every fallible call returns a `GsStatus` code; on failure the
//! message is kept per thread and read with [`gs_last_error`]. Panics never
//! cross the boundary: they surface as `GS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use graysim::netlist::{parse, prepare, FsLoader, NetlistError, Simulation};
use graysim::neural::{load_model, Mlp};
use graysim::solvers::{SolverError, TimeSeries};

/// Status codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    Io = 3,
    /// Netlist syntax or semantic error; see [`gs_last_error_position`].
    Parse = 4,
    /// The netlist parsed but its system could not be assembled.
    Build = 5,
    NonConvergence = 6,
    /// A buffer length or index disagrees with the handle's dimensions.
    Dimension = 7,
    /// Numerical failure other than non-convergence.
    Numerical = 8,
    Panic = 9,
}

/// Prepared netlist: system, analysis, solver settings and input schedule.
pub struct GsSystem {
    sim: Simulation,
}

/// Trained network loaded from a GSNN file.
pub struct GsModel {
    net: Mlp,
}

/// Transient result: uniformly spaced time points with full solution vectors.
pub struct GsTrajectory {
    series: TimeSeries,
}

struct LastError {
    message: CString,
    position: Option<(usize, usize)>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn set_error(message: &str, position: Option<(usize, usize)>) {
    let message = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(LastError { message, position }));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(GsStatus, String, Option<(usize, usize)>);

impl Failure {
    fn new(status: GsStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into(), None)
    }
}

impl From<NetlistError> for Failure {
    fn from(e: NetlistError) -> Self {
        let status = match e {
            NetlistError::NotSquare { .. } | NetlistError::ModelDimMismatch { .. } => GsStatus::Build,
            NetlistError::FileNotFound { .. } => GsStatus::Io,
            _ => GsStatus::Parse,
        };
        Self(status, e.to_string(), e.span().map(|s| (s.line, s.col)))
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        let status = match e {
            SolverError::NonConvergence { .. } | SolverError::StepNonConvergence { .. } => GsStatus::NonConvergence,
            _ => GsStatus::Numerical,
        };
        Self::new(status, e.to_string())
    }
}

/// Runs `f`, records any failure and converts it to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsStatus::Ok,
        Ok(Err(Failure(status, msg, pos))) => {
            set_error(&msg, pos);
            status
        }
        Err(_) => {
            set_error("internal panic", None);
            GsStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a nul-terminated string valid for the call.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(GsStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(GsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or valid for `len` reads.
unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::new(GsStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` is null or valid for `len` writes.
unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::new(GsStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn need(len: usize, want: usize, what: &str) -> Result<(), Failure> {
    if len == want {
        Ok(())
    } else {
        Err(Failure::new(
            GsStatus::Dimension,
            format!("{what} has length {len}, expected {want}"),
        ))
    }
}

fn null(what: &str) -> Failure {
    Failure::new(GsStatus::NullArgument, format!("{what} is null"))
}

fn build(text: &str, base: &Path) -> Result<Box<GsSystem>, Failure> {
    let doc = parse(text)?;
    let sim = prepare(&doc, &mut FsLoader::new(base))?;
    Ok(Box::new(GsSystem { sim }))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn gs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |e| e.message.as_ptr()))
}

/// Netlist line and column (1-based) of the last failure on this thread.
/// Returns 1 and fills both when the failure carried a position, else 0.
///
/// # Safety
/// `line` and `col` are null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gs_last_error_position(line: *mut usize, col: *mut usize) -> i32 {
    let pos = LAST_ERROR.with(|e| e.borrow().as_ref().and_then(|e| e.position));
    match pos {
        Some((l, c)) if !line.is_null() && !col.is_null() => {
            *line = l;
            *col = c;
            1
        }
        _ => 0,
    }
}

/// Parses and prepares a netlist file; model and txnet paths resolve against its directory.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gs_system_load(path: *const c_char, out: *mut *mut GsSystem) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = Path::new(str_arg(path, "path")?);
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(GsStatus::Io, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        *out = Box::into_raw(build(&text, base)?);
        Ok(())
    })
}

/// Parses and prepares netlist text; relative paths resolve against `base_dir`
/// (the working directory when null).
///
/// # Safety
/// `text` is a nul-terminated string, `base_dir` null or one; `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gs_system_parse(
    text: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut GsSystem,
) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(text, "text")?;
        let base = if base_dir.is_null() {
            "."
        } else {
            str_arg(base_dir, "base_dir")?
        };
        *out = Box::into_raw(build(text, Path::new(base))?);
        Ok(())
    })
}

/// # Safety
/// `sys` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gs_system_free(sys: *mut GsSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Number of unknowns (internal states then node voltages); 0 for null.
///
/// # Safety
/// `sys` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_system_len(sys: *const GsSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.sim.system.len())
}

/// Writes the display name of unknown `index` as a nul-terminated string.
/// `needed` (optional) receives the size including the terminator; a buffer
/// that is too small yields `GS_STATUS_DIMENSION` and no write.
///
/// # Safety
/// `sys` is a live handle; `buf` is null or valid for `cap` writes; `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn gs_system_unknown_name(
    sys: *const GsSystem,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> GsStatus {
    guard(|| {
        let sys = sys.as_ref().ok_or_else(|| null("sys"))?;
        if index >= sys.sim.system.len() {
            return Err(Failure::new(
                GsStatus::Dimension,
                format!("unknown {index} out of range"),
            ));
        }
        let name = sys.sim.system.unknown_name(index);
        let size = name.len() + 1;
        if !needed.is_null() {
            *needed = size;
        }
        if buf.is_null() || cap < size {
            return Err(Failure::new(GsStatus::Dimension, format!("name needs {size} bytes")));
        }
        ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

/// Steady-state solve at `u(0)`; writes the solution (length `gs_system_len`)
/// and, when non-null, the Newton iteration count.
///
/// # Safety
/// `sys` is a live handle; `z` valid for `len` writes; `iterations` null or valid.
#[no_mangle]
pub unsafe extern "C" fn gs_system_dc(
    sys: *const GsSystem,
    z: *mut f64,
    len: usize,
    iterations: *mut usize,
) -> GsStatus {
    guard(|| {
        let sys = sys.as_ref().ok_or_else(|| null("sys"))?;
        need(len, sys.sim.system.len(), "z")?;
        let z = slice_out(z, len, "z")?;
        let (sol, report) = sys.sim.run_dc()?;
        z.copy_from_slice(&sol);
        if !iterations.is_null() {
            *iterations = report.iterations;
        }
        Ok(())
    })
}

/// Transient solve per the netlist's `analysis tran` directive.
///
/// # Safety
/// `sys` is a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gs_system_tran(sys: *const GsSystem, out: *mut *mut GsTrajectory) -> GsStatus {
    guard(|| {
        let sys = sys.as_ref().ok_or_else(|| null("sys"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let series = sys.sim.run_tran()?;
        *out = Box::into_raw(Box::new(GsTrajectory { series }));
        Ok(())
    })
}

/// # Safety
/// `traj` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_trajectory_free(traj: *mut GsTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Number of time points, including the initial one; 0 for null.
///
/// # Safety
/// `traj` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_trajectory_len(traj: *const GsTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.series.len())
}

/// Copies time point `k`: its time into `t` and its solution into `z`.
///
/// # Safety
/// `traj` is a live handle; `t` valid for one write; `z` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn gs_trajectory_point(
    traj: *const GsTrajectory,
    k: usize,
    t: *mut f64,
    z: *mut f64,
    len: usize,
) -> GsStatus {
    guard(|| {
        let traj = traj.as_ref().ok_or_else(|| null("traj"))?;
        if t.is_null() {
            return Err(null("t"));
        }
        let s = &traj.series;
        if k >= s.len() {
            return Err(Failure::new(
                GsStatus::Dimension,
                format!("point {k} out of range ({} points)", s.len()),
            ));
        }
        need(len, s.states[k].len(), "z")?;
        slice_out(z, len, "z")?.copy_from_slice(&s.states[k]);
        *t = s.times[k];
        Ok(())
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gs_model_load(path: *const c_char, out: *mut *mut GsModel) -> GsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let net = load_model(path).map_err(|e| Failure::new(GsStatus::Io, format!("{path}: {e}")))?;
        *out = Box::into_raw(Box::new(GsModel { net }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_model_free(model: *mut GsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_model_input_dim(model: *const GsModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.input_dim())
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_model_output_dim(model: *const GsModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.output_dim())
}

/// Network output at `x`.
///
/// # Safety
/// `model` is a live handle; `x` valid for `nx` reads, `y` for `ny` writes.
#[no_mangle]
pub unsafe extern "C" fn gs_model_forward(
    model: *const GsModel,
    x: *const f64,
    nx: usize,
    y: *mut f64,
    ny: usize,
) -> GsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        need(nx, m.net.input_dim(), "x")?;
        need(ny, m.net.output_dim(), "y")?;
        let out = m
            .net
            .forward(slice_arg(x, nx, "x")?)
            .map_err(|e| Failure::new(GsStatus::Numerical, e.to_string()))?;
        slice_out(y, ny, "y")?.copy_from_slice(&out);
        Ok(())
    })
}

/// Input Jacobian at `x`, row-major `output_dim x input_dim`.
///
/// # Safety
/// `model` is a live handle; `x` valid for `nx` reads, `jac` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn gs_model_input_jacobian(
    model: *const GsModel,
    x: *const f64,
    nx: usize,
    jac: *mut f64,
    len: usize,
) -> GsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        need(nx, m.net.input_dim(), "x")?;
        need(len, m.net.input_dim() * m.net.output_dim(), "jac")?;
        let j = m
            .net
            .input_jacobian(slice_arg(x, nx, "x")?)
            .map_err(|e| Failure::new(GsStatus::Numerical, e.to_string()))?;
        slice_out(jac, len, "jac")?.copy_from_slice(j.as_slice());
        Ok(())
    })
}
