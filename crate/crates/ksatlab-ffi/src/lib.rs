//! C ABI over the ksatlab core.
//!
//! Formulas and populations cross the boundary as opaque handles that the
//! caller releases with the matching `_free` function. Every fallible call
//! returns a [`KsatStatus`]; on failure the message is available from
//! [`ksat_last_error`] on the same thread until the next call.
//!
//! `beta` arguments are plain doubles; `INFINITY` selects the hard-constraint limit.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ksatlab::bp::{bethe_free_energy, bp_marginals, run_bp};
use ksatlab::density::{self, Population};
use ksatlab::exact;
use ksatlab::model::{gen_random, Beta, Formula, ModelParams};
use ksatlab::rng::from_seed;
use ksatlab::{rsb, scalars, Error};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KsatStatus {
    Ok = 0,
    InvalidInput = 1,
    Undefined = 2,
    ResourceLimit = 3,
    SolverFailure = 4,
    Parse = 5,
    Io = 6,
    NullPointer = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque formula handle.
pub struct KsatFormula(Formula);

/// Opaque population handle.
pub struct KsatPopulation(Population);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KsatStatus {
    match e {
        Error::InvalidInput(_) => KsatStatus::InvalidInput,
        Error::Undefined(_) => KsatStatus::Undefined,
        Error::ResourceLimit(_) => KsatStatus::ResourceLimit,
        Error::SolverFailure(_) => KsatStatus::SolverFailure,
        Error::Parse(_) => KsatStatus::Parse,
        Error::Io(_) => KsatStatus::Io,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), KsatStatus>) -> KsatStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KsatStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            KsatStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, KsatStatus>;
}

impl<T> OrStatus<T> for ksatlab::Result<T> {
    fn or_status(self) -> Result<T, KsatStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn null_check<T>(p: *const T, name: &str) -> Result<(), KsatStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(KsatStatus::NullPointer);
    }
    Ok(())
}

fn beta_of(b: f64) -> Result<Beta, KsatStatus> {
    if b.is_infinite() && b > 0.0 {
        Ok(Beta::Inf)
    } else if b >= 0.0 {
        Ok(Beta::Finite(b))
    } else {
        set_error(format!("beta must be >= 0, got {b}"));
        Err(KsatStatus::InvalidInput)
    }
}

fn params(k: usize, d: f64, beta: f64) -> Result<ModelParams, KsatStatus> {
    ModelParams::new(k, d, beta_of(beta)?).or_status()
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn ksat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ksat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses DIMACS CNF text.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ksat_formula_from_dimacs(text: *const c_char, out: *mut *mut KsatFormula) -> KsatStatus {
    guard(|| {
        null_check(text, "text")?;
        null_check(out, "out")?;
        let s = CStr::from_ptr(text).to_str().map_err(|_| {
            set_error("text is not UTF-8".into());
            KsatStatus::Parse
        })?;
        let f = Formula::from_dimacs(s).or_status()?;
        *out = Box::into_raw(Box::new(KsatFormula(f)));
        Ok(())
    })
}

/// Random formula with `Po(dn/k)` clauses.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ksat_formula_random(
    k: usize,
    d: f64,
    beta: f64,
    n: usize,
    seed: u64,
    out: *mut *mut KsatFormula,
) -> KsatStatus {
    guard(|| {
        null_check(out, "out")?;
        let p = params(k, d, beta)?;
        let f = gen_random(&p, n, &mut from_seed(seed)).or_status()?;
        *out = Box::into_raw(Box::new(KsatFormula(f)));
        Ok(())
    })
}

/// Releases a formula. NULL is ignored.
///
/// # Safety
/// `f` must come from a `ksat_formula_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ksat_formula_free(f: *mut KsatFormula) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Number of variables, 0 for NULL.
///
/// # Safety
/// `f` must be NULL or a live formula handle.
#[no_mangle]
pub unsafe extern "C" fn ksat_formula_num_vars(f: *const KsatFormula) -> usize {
    f.as_ref().map_or(0, |f| f.0.n())
}

/// Number of clauses, 0 for NULL.
///
/// # Safety
/// `f` must be NULL or a live formula handle.
#[no_mangle]
pub unsafe extern "C" fn ksat_formula_num_clauses(f: *const KsatFormula) -> usize {
    f.as_ref().map_or(0, |f| f.0.m())
}

/// `ln Z` by enumeration.
///
/// # Safety
/// `f` must be a live formula handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ksat_exact_log_z(f: *const KsatFormula, beta: f64, out: *mut f64) -> KsatStatus {
    guard(|| {
        null_check(f, "formula")?;
        null_check(out, "out")?;
        let f = &(*f).0;
        let p = params(f.k().max(2), 0.0, beta)?;
        *out = exact::exact_log_z(f, &p).or_status()?;
        Ok(())
    })
}

fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), KsatStatus> {
    if len < src.len() {
        set_error(format!("buffer holds {len} values, need {}", src.len()));
        return Err(KsatStatus::BufferTooSmall);
    }
    if !src.is_empty() {
        null_check(buf, "buffer")?;
        // SAFETY: the caller guarantees `buf` holds `len >= src.len()` doubles.
        unsafe { ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len()) };
    }
    Ok(())
}

/// Exact marginals `P(σ_x = +1)` written to `buf[0..n]`.
///
/// # Safety
/// `f` must be a live formula handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ksat_exact_marginals(f: *const KsatFormula, beta: f64, buf: *mut f64, len: usize) -> KsatStatus {
    guard(|| {
        null_check(f, "formula")?;
        let f = &(*f).0;
        let p = params(f.k().max(2), 0.0, beta)?;
        copy_out(&exact::exact_marginals(f, &p).or_status()?, buf, len)
    })
}

/// Runs BP from uniform messages. Marginals go to `buf[0..n]`; the Bethe
/// free energy, round count and convergence flag to the optional out pointers.
///
/// # Safety
/// `f` must be a live formula handle, `buf` must hold `len` doubles and the
/// out pointers must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn ksat_bp_run(
    f: *const KsatFormula,
    beta: f64,
    t_max: usize,
    tol: f64,
    buf: *mut f64,
    len: usize,
    bethe: *mut f64,
    iterations: *mut usize,
    converged: *mut bool,
) -> KsatStatus {
    guard(|| {
        null_check(f, "formula")?;
        if t_max == 0 || !(tol > 0.0) {
            set_error("need t_max >= 1 and tol > 0".into());
            return Err(KsatStatus::InvalidInput);
        }
        let f = &(*f).0;
        let p = params(f.k().max(2), 0.0, beta)?;
        let run = run_bp(f, &p, t_max, tol);
        copy_out(&bp_marginals(f, &run.msgs), buf, len)?;
        if let Some(b) = bethe.as_mut() {
            *b = bethe_free_energy(f, &p, &run.msgs);
        }
        if let Some(i) = iterations.as_mut() {
            *i = run.iterations;
        }
        if let Some(c) = converged.as_mut() {
            *c = run.converged;
        }
        Ok(())
    })
}

/// Population dynamics from the point mass at 1/2 with `W_1` tolerance `tol`
/// (`tol <= 0` selects `5/sqrt(n)`).
///
/// # Safety
/// `out` must be writable; `converged` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn ksat_population_fixed_point(
    k: usize,
    d: f64,
    beta: f64,
    n: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    out: *mut *mut KsatPopulation,
    converged: *mut bool,
) -> KsatStatus {
    guard(|| {
        null_check(out, "out")?;
        let p = params(k, d, beta)?;
        let tol = if tol > 0.0 { tol } else { 5.0 / (n.max(1) as f64).sqrt() };
        let fp = density::fixed_point(&p, n, max_iters, tol, &mut from_seed(seed)).or_status()?;
        if let Some(c) = converged.as_mut() {
            *c = fp.converged;
        }
        *out = Box::into_raw(Box::new(KsatPopulation(fp.pop)));
        Ok(())
    })
}

/// Population from caller samples in `[0, 1]`.
///
/// # Safety
/// `samples` must hold `len` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ksat_population_new(samples: *const f64, len: usize, out: *mut *mut KsatPopulation) -> KsatStatus {
    guard(|| {
        null_check(out, "out")?;
        null_check(samples, "samples")?;
        let v = std::slice::from_raw_parts(samples, len).to_vec();
        *out = Box::into_raw(Box::new(KsatPopulation(Population::new(v).or_status()?)));
        Ok(())
    })
}

/// Releases a population. NULL is ignored.
///
/// # Safety
/// `p` must come from a `ksat_population_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ksat_population_free(p: *mut KsatPopulation) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Population size, 0 for NULL.
///
/// # Safety
/// `p` must be NULL or a live population handle.
#[no_mangle]
pub unsafe extern "C" fn ksat_population_len(p: *const KsatPopulation) -> usize {
    p.as_ref().map_or(0, |p| p.0.len())
}

/// Copies the samples to `buf`.
///
/// # Safety
/// `p` must be a live population handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ksat_population_samples(p: *const KsatPopulation, buf: *mut f64, len: usize) -> KsatStatus {
    guard(|| {
        null_check(p, "population")?;
        copy_out((*p).0.samples(), buf, len)
    })
}

/// Monte Carlo Bethe functional of a population.
///
/// # Safety
/// `pop` must be a live population handle; `value` and `stderr` writable.
#[no_mangle]
pub unsafe extern "C" fn ksat_bethe_functional(
    pop: *const KsatPopulation,
    k: usize,
    d: f64,
    beta: f64,
    samples: usize,
    seed: u64,
    value: *mut f64,
    stderr: *mut f64,
) -> KsatStatus {
    guard(|| {
        null_check(pop, "population")?;
        null_check(value, "value")?;
        null_check(stderr, "stderr")?;
        let p = params(k, d, beta)?;
        let est = rsb::bethe_functional(&(*pop).0, &p, samples, &mut from_seed(seed)).or_status()?;
        *value = est.value;
        *stderr = est.stderr;
        Ok(())
    })
}

/// Root of the balance equation for `p` at clause length `k`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ksat_solve_p(k: usize, beta: f64, out: *mut f64) -> KsatStatus {
    guard(|| {
        null_check(out, "out")?;
        params(k, 0.0, beta)?;
        *out = scalars::solve_p(k, beta_of(beta)?);
        Ok(())
    })
}

/// Minimizes the scalar gap function on a uniform grid of `grid` points in `(0, 1]`.
///
/// # Safety
/// The three out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ksat_rsb_scalar_gap(
    c: f64,
    grid: usize,
    argmin_y: *mut f64,
    phi_min: *mut f64,
    phi_at_1: *mut f64,
) -> KsatStatus {
    guard(|| {
        null_check(argmin_y, "argmin_y")?;
        null_check(phi_min, "phi_min")?;
        null_check(phi_at_1, "phi_at_1")?;
        let ys: Vec<f64> = (1..=grid.max(1)).map(|i| i as f64 / grid.max(1) as f64).collect();
        let g = rsb::rsb_scalar_gap(c, &ys).or_status()?;
        *argmin_y = g.argmin_y;
        *phi_min = g.phi_min;
        *phi_at_1 = g.phi_at_1;
        Ok(())
    })
}
