//! C ABI over the `hostcp` engine.
//!
//! Every fallible function returns a [`HostcpStatus`]. On failure, the message
//! is available from [`hostcp_last_error`] on the same thread until the next
//! failing call. Objects are opaque handles that must be released with the
//! matching `_free` function. Output arrays are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hostcp::dataset::{gen_synthetic, load_csv, LabeledDataset};
use hostcp::difflayer::differentiate_selection;
use hostcp::embedder::DistanceBlocks;
use hostcp::harness::ndcg_at_k;
use hostcp::select::{hard_select, solve_selection, SelectionProblem, SelectionSolution};
use hostcp::tensor::Matrix;
use hostcp::trainer::{extract_selection, run, TrainLog, TrainerConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostcpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// A selection program and, once solved, its solution.
pub struct HostcpProblem {
    problem: SelectionProblem,
    solution: Option<SelectionSolution>,
}

pub struct HostcpDataset {
    inner: LabeledDataset,
}

pub struct HostcpTrainLog {
    inner: TrainLog,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(hostcp::Error),
}

impl From<hostcp::Error> for Failure {
    fn from(e: hostcp::Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> HostcpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HostcpStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer: {name}"));
            HostcpStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(format!("invalid argument: {msg}"));
            HostcpStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            let status = if e.is_config() {
                HostcpStatus::Config
            } else if e.is_numerical() {
                HostcpStatus::Numerical
            } else if matches!(e, hostcp::Error::Io { .. }) {
                HostcpStatus::Io
            } else {
                HostcpStatus::InvalidArgument
            };
            set_error(e.to_string());
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HostcpStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn write<T>(p: *mut T, value: T, name: &'static str) -> FfiResult<()> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    p.write(value);
    Ok(())
}

unsafe fn write_opt<T>(p: *mut T, value: T) {
    if !p.is_null() {
        p.write(value);
    }
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn solved(p: &HostcpProblem) -> FfiResult<&SelectionSolution> {
    p.solution
        .as_ref()
        .ok_or_else(|| Failure::Arg("problem has not been solved".into()))
}

/// Message of the last failure on this thread, or NULL. Owned by the library;
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hostcp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a selection program from row-major distance blocks `d_new_new`
/// `[b x b]` and `d_new_old` `[b x m]` (may be NULL when `m == 0`).
///
/// # Safety
/// The arrays must hold `b*b` and `b*m` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_problem_new(
    d_new_new: *const f64,
    b: usize,
    d_new_old: *const f64,
    m: usize,
    gamma: f64,
    epsilon: f64,
    xi: f64,
    out: *mut *mut HostcpProblem,
) -> HostcpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let nn = input(d_new_new, b * b, "d_new_new")?;
        let no = input(d_new_old, b * m, "d_new_old")?;
        let blocks = DistanceBlocks::new(
            Matrix::from_vec(b, b, nn.to_vec())?,
            Matrix::from_vec(b, m, no.to_vec())?,
        )?;
        let problem = SelectionProblem::new(blocks, gamma, epsilon, xi)?;
        let boxed = Box::new(HostcpProblem { problem, solution: None });
        write(out, Box::into_raw(boxed), "out")
    })
}

/// # Safety
/// `problem` must be NULL or a handle from [`hostcp_problem_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hostcp_problem_free(problem: *mut HostcpProblem) {
    free(problem);
}

/// Number of representatives the program may select.
///
/// # Safety
/// `problem` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_problem_budget(
    problem: *const HostcpProblem,
    out: *mut usize,
) -> HostcpStatus {
    guard(|| {
        let p = handle(problem, "problem")?;
        write(out, p.problem.budget, "out")
    })
}

/// Solves the program and keeps the solution on the handle. `iterations` and
/// `residual` may be NULL.
///
/// # Safety
/// `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hostcp_problem_solve(
    problem: *mut HostcpProblem,
    iterations: *mut usize,
    residual: *mut f64,
) -> HostcpStatus {
    guard(|| {
        let p = problem.as_mut().ok_or(Failure::Null("problem"))?;
        let s = solve_selection(&p.problem)?;
        write_opt(iterations, s.iterations);
        write_opt(residual, s.kkt_residual);
        p.solution = Some(s);
        Ok(())
    })
}

/// Copies the solution. `u` receives `b` values; `z_new` (`b*b`) and
/// `z_old` (`b*m`) are row-major and may be NULL.
///
/// # Safety
/// Non-NULL arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn hostcp_problem_solution(
    problem: *const HostcpProblem,
    u: *mut f64,
    z_new: *mut f64,
    z_old: *mut f64,
) -> HostcpStatus {
    guard(|| {
        let p = handle(problem, "problem")?;
        let s = solved(p)?;
        output(u, s.u.len(), "u")?.copy_from_slice(&s.u);
        if !z_new.is_null() {
            output(z_new, s.z_new.as_slice().len(), "z_new")?.copy_from_slice(s.z_new.as_slice());
        }
        if !z_old.is_null() {
            output(z_old, s.z_old.as_slice().len(), "z_old")?.copy_from_slice(s.z_old.as_slice());
        }
        Ok(())
    })
}

/// Writes the selected positions (ascending) into `indices`, which must hold
/// `b` entries, and their number into `count`.
///
/// # Safety
/// `problem` must be a live, solved handle; `indices` must hold `b` entries.
#[no_mangle]
pub unsafe extern "C" fn hostcp_problem_hard_select(
    problem: *const HostcpProblem,
    indices: *mut usize,
    count: *mut usize,
) -> HostcpStatus {
    guard(|| {
        let p = handle(problem, "problem")?;
        let s = solved(p)?;
        let selected = hard_select(s, &p.problem).indices;
        let dst = output(indices, p.problem.num_new(), "indices")?;
        dst[..selected.len()].copy_from_slice(&selected);
        write(count, selected.len(), "count")
    })
}

/// Pulls `dJ/du` (`b` values) back to the distance blocks. `grad_new_new`
/// receives `b*b` values; `grad_new_old` receives `b*m` and may be NULL when
/// `m == 0`.
///
/// # Safety
/// `problem` must be a live, solved handle and the arrays must have the
/// stated lengths.
#[no_mangle]
pub unsafe extern "C" fn hostcp_problem_differentiate(
    problem: *const HostcpProblem,
    dj_du: *const f64,
    grad_new_new: *mut f64,
    grad_new_old: *mut f64,
) -> HostcpStatus {
    guard(|| {
        let p = handle(problem, "problem")?;
        let s = solved(p)?;
        let (b, m) = (p.problem.num_new(), p.problem.num_old());
        let a = input(dj_du, b, "dj_du")?;
        let g = differentiate_selection(&p.problem, s, a, None)?;
        output(grad_new_new, b * b, "grad_new_new")?.copy_from_slice(g.d_new_new.as_slice());
        output(grad_new_old, b * m, "grad_new_old")?.copy_from_slice(g.d_new_old.as_slice());
        Ok(())
    })
}

/// NDCG@k of the ranking by descending `scores` against binary relevance.
///
/// # Safety
/// `scores` and `relevant` must hold `n` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_ndcg_at_k(
    scores: *const f64,
    relevant: *const bool,
    n: usize,
    k: usize,
    out: *mut f64,
) -> HostcpStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let r = input(relevant, n, "relevant")?;
        write(out, ndcg_at_k(s, r, k)?, "out")
    })
}

/// Seeded synthetic binary classification data.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_dataset_synthetic(
    n: usize,
    d: usize,
    seed: u64,
    out: *mut *mut HostcpDataset,
) -> HostcpStatus {
    guard(|| {
        let inner = gen_synthetic(n, d, seed)?;
        write(out, Box::into_raw(Box::new(HostcpDataset { inner })), "out")
    })
}

/// Loads a `f0,...,f{d-1},label` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_dataset_load_csv(
    path: *const c_char,
    out: *mut *mut HostcpDataset,
) -> HostcpStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| Failure::Arg(format!("path is not UTF-8: {e}")))?;
        let inner = load_csv(path)?;
        write(out, Box::into_raw(Box::new(HostcpDataset { inner })), "out")
    })
}

/// # Safety
/// `dataset` must be a live handle; `n` and `d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_dataset_shape(
    dataset: *const HostcpDataset,
    n: *mut usize,
    d: *mut usize,
) -> HostcpStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.inner;
        write(n, ds.n(), "n")?;
        write(d, ds.d(), "d")
    })
}

/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hostcp_dataset_free(dataset: *mut HostcpDataset) {
    free(dataset);
}

/// Joint training of predictor and embedder. `config_json` holds trainer
/// settings as a JSON object; NULL or omitted keys take the defaults.
///
/// # Safety
/// Dataset handles must be live, `config_json` NULL or NUL-terminated, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_train(
    train: *const HostcpDataset,
    test: *const HostcpDataset,
    config_json: *const c_char,
    out: *mut *mut HostcpTrainLog,
) -> HostcpStatus {
    guard(|| {
        let train = &handle(train, "train")?.inner;
        let test = &handle(test, "test")?.inner;
        let config = if config_json.is_null() {
            TrainerConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|e| hostcp::Error::Config(format!("config is not UTF-8: {e}")))?;
            serde_json::from_str(text).map_err(hostcp::Error::from)?
        };
        let inner = run(train, test, &config)?;
        write(out, Box::into_raw(Box::new(HostcpTrainLog { inner })), "out")
    })
}

/// Test accuracy of the final predictor.
///
/// # Safety
/// `log` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_train_log_accuracy(
    log: *const HostcpTrainLog,
    out: *mut f64,
) -> HostcpStatus {
    guard(|| {
        let log = handle(log, "log")?;
        write(out, log.inner.final_test_accuracy, "out")
    })
}

/// The most valuable `fraction` of training ids, in rank order. `ids` holds
/// `capacity` entries; `count` always receives the required length, and the
/// call fails with `INVALID_ARGUMENT` when it exceeds `capacity`.
///
/// # Safety
/// `log` must be a live handle, `ids` must hold `capacity` entries and
/// `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_train_log_extract(
    log: *const HostcpTrainLog,
    fraction: f64,
    ids: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> HostcpStatus {
    guard(|| {
        let log = handle(log, "log")?;
        let selected = extract_selection(&log.inner, fraction)?;
        write(count, selected.len(), "count")?;
        if selected.len() > capacity {
            return Err(Failure::Arg(format!(
                "capacity {capacity} is below the {} ids required",
                selected.len()
            )));
        }
        output(ids, selected.len(), "ids")?.copy_from_slice(&selected);
        Ok(())
    })
}

/// Serializes the log as JSON. Release the string with [`hostcp_string_free`].
///
/// # Safety
/// `log` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hostcp_train_log_to_json(
    log: *const HostcpTrainLog,
    out: *mut *mut c_char,
) -> HostcpStatus {
    guard(|| {
        let log = handle(log, "log")?;
        let json = CString::new(log.inner.to_json()?)
            .map_err(|e| Failure::Arg(format!("log contains NUL: {e}")))?;
        write(out, json.into_raw(), "out")
    })
}

/// # Safety
/// `log` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hostcp_train_log_free(log: *mut HostcpTrainLog) {
    free(log);
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hostcp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
