//! C ABI for svolterra.
//!
//! Objects cross the boundary as opaque handles created by `sv_*_new`-style
//! constructors and released with the matching `sv_*_free`. Every function
//! returns an [`SvStatus`]; on failure the message is available from
//! [`sv_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use svolterra::config::{parse_config, Problem, RunConfig};
use svolterra::kernel::{self, MemoryKernel};
use svolterra::mittag_leffler::mittag_leffler;
use svolterra::noise::{sample_noise_path, NoisePath};
use svolterra::solver::{MildSolutionPath, Solver, SolverTables};
use svolterra::{verify, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numeric = 4,
    PropertyFailed = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A validated configuration with its kernel, operator and resolvent tables.
pub struct SvProblem {
    cfg: RunConfig,
    problem: Problem,
    tables: SolverTables,
}

/// One simulated path.
pub struct SvPath {
    path: MildSolutionPath,
    large_jumps: usize,
    small_jumps: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|b| *b != 0));
    });
}

fn status_of(e: &Error) -> SvStatus {
    match e.exit_code() {
        2 => SvStatus::Config,
        _ => SvStatus::Numeric,
    }
}

/// Run `f`, mapping errors and panics to a status and recording the message.
fn guard<F: FnOnce() -> Result<(), (SvStatus, String)>>(f: F) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SvStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SvStatus::Panic
        }
    }
}

fn lib<T>(r: svolterra::Result<T>) -> Result<T, (SvStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null() -> (SvStatus, String) {
    (SvStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, (SvStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| (SvStatus::InvalidUtf8, "argument is not valid UTF-8".into()))
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, (SvStatus, String)> {
    p.as_mut().ok_or_else(null)
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, (SvStatus, String)> {
    p.as_ref().ok_or_else(null)
}

/// Copy the last error message of this thread into `buf` (NUL-terminated).
/// Returns the message length excluding the terminator; if it is `>= len`
/// the message was truncated. `buf` may be null when `len` is 0.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Sector parameter of the model kernel `t^(rho-2) e^(-eta t) / Gamma(rho-1)`.
///
/// # Safety
/// `out_rho` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn sv_sector_parameter(rho: f64, eta: f64, out_rho: *mut f64) -> SvStatus {
    guard(|| {
        let k = lib(MemoryKernel::model(rho, eta))?;
        *out(out_rho)? = lib(kernel::sector_parameter(&k))?;
        Ok(())
    })
}

/// `E_rho(x)` for `x <= 0`.
///
/// # Safety
/// `out_value` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn sv_mittag_leffler(rho: f64, x: f64, out_value: *mut f64) -> SvStatus {
    guard(|| {
        *out(out_value)? = lib(mittag_leffler(rho, x))?;
        Ok(())
    })
}

/// Parse a configuration (flat dotted-key TOML) and build its resolvent
/// tables. Relative `kernel.table_path` entries resolve against the working
/// directory. Release the handle with [`sv_problem_free`].
///
/// # Safety
/// `config` must be a NUL-terminated string; `out_problem` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_problem_new(config: *const c_char, out_problem: *mut *mut SvProblem) -> SvStatus {
    guard(|| {
        let slot = out(out_problem)?;
        *slot = ptr::null_mut();
        let cfg = lib(parse_config(str_arg(config)?))?;
        let problem = lib(cfg.build())?;
        let tables = lib(verify::build_tables(&cfg, &problem))?;
        *slot = Box::into_raw(Box::new(SvProblem { cfg, problem, tables }));
        Ok(())
    })
}

/// # Safety
/// `problem` must come from [`sv_problem_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_problem_free(problem: *mut SvProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of spectral modes and time steps of the configured grid.
///
/// # Safety
/// `problem` must be a live handle; `modes` and `steps` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sv_problem_shape(problem: *const SvProblem, modes: *mut usize, steps: *mut usize) -> SvStatus {
    guard(|| {
        let p = handle(problem)?;
        *out(modes)? = p.tables.table.modes();
        *out(steps)? = p.cfg.solver.n_steps();
        Ok(())
    })
}

/// Resolvent value `s_mu_k(t_n)` for 0-based mode `k`.
///
/// # Safety
/// `problem` must be a live handle; `out_value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_problem_resolvent(problem: *const SvProblem, k: usize, n: usize, out_value: *mut f64) -> SvStatus {
    guard(|| {
        let t = &handle(problem)?.tables.table;
        if k >= t.modes() || n > t.n_steps() {
            return Err((SvStatus::Config, format!("index (k={k}, n={n}) outside {} modes x {} steps", t.modes(), t.n_steps())));
        }
        *out(out_value)? = t.value(k, n);
        Ok(())
    })
}

/// Simulate path `path_index` of the stream family of `seed` with the
/// direct stepper. Release the result with [`sv_path_free`].
///
/// # Safety
/// `problem` must be a live handle; `out_path` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_simulate(problem: *const SvProblem, seed: u64, path_index: u64, out_path: *mut *mut SvPath) -> SvStatus {
    guard(|| {
        let slot = out(out_path)?;
        *slot = ptr::null_mut();
        let p = handle(problem)?;
        let select = p.cfg.noise_selection();
        let law = select.small.then_some(p.problem.law);
        let solver = lib(Solver::new(&p.cfg.solver, &p.tables, &p.problem.op, &p.problem.coeffs, law))?;
        let noise = if select.small || select.large {
            lib(sample_noise_path(&p.problem.law, p.cfg.solver.horizon, seed, path_index, select))?
        } else {
            NoisePath::default()
        };
        let path = lib(solver.step(&noise))?;
        *slot = Box::into_raw(Box::new(SvPath { path, large_jumps: noise.large.count(), small_jumps: noise.small.len() }));
        Ok(())
    })
}

/// # Safety
/// `path` must come from [`sv_simulate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sv_path_free(path: *mut SvPath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

/// Number of large and small jumps that drove the path.
///
/// # Safety
/// `path` must be a live handle; `large` and `small` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sv_path_jumps(path: *const SvPath, large: *mut usize, small: *mut usize) -> SvStatus {
    guard(|| {
        let p = handle(path)?;
        *out(large)? = p.large_jumps;
        *out(small)? = p.small_jumps;
        Ok(())
    })
}

/// Copy the grid values (time-major, `(steps + 1) * modes` doubles) into
/// `buf`. With a null `buf` or short `len`, only `needed` is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `path` must be a live handle; `buf` must hold `len` doubles; `needed`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sv_path_values(path: *const SvPath, buf: *mut f64, len: usize, needed: *mut usize) -> SvStatus {
    guard(|| {
        let v = &handle(path)?.path.values;
        *out(needed)? = v.len();
        if buf.is_null() || len < v.len() {
            return Err((SvStatus::BufferTooSmall, format!("need {} doubles, got {len}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// Run the invariant suite on the problem. Returns `PropertyFailed` if any
/// check fails; the failing check names are in [`sv_last_error`].
///
/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_verify(problem: *const SvProblem) -> SvStatus {
    guard(|| {
        let p = handle(problem)?;
        let report = lib(verify::run_suite(&p.cfg, &p.problem, &p.tables))?;
        if report.passed {
            return Ok(());
        }
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err((SvStatus::PropertyFailed, format!("failed checks: {}", failed.join(", "))))
    })
}
