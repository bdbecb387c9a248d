//! C ABI over the itolab pipeline.
//!
//! Two kinds of surface: `ito_run_stage` drives the same six stages as the
//! command-line tool from a JSON config string, and the `ito_trajectory_*`
//! family reads, inspects, and writes trajectory files through an opaque
//! handle. All functions are panic-safe at the boundary; failures return a
//! status code and leave a message retrievable per thread via
//! `ito_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use itolab::cli::config::RunConfig;
use itolab::cli::manifest::RunManifest;
use itolab::cli::stages;
use itolab::data::io::{read_trajectory, write_trajectory};
use itolab::systems::Trajectory;
use itolab::ItoError;

/// Status codes returned across the ABI. `Config`, `Numeric`, and `Format`
/// mirror the command-line exit codes; `Usage` covers boundary misuse (null
/// pointers, bad UTF-8, wrong buffer sizes, unknown stage names) and
/// panics caught at the boundary.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItoStatus {
    Ok = 0,
    Usage = 1,
    Config = 2,
    Numeric = 3,
    Format = 4,
}

/// Opaque trajectory handle. Create with `ito_trajectory_read`, release with
/// `ito_trajectory_free`.
pub struct ItoTrajectory {
    inner: Trajectory,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &ItoError) -> ItoStatus {
    match err.exit_code() {
        2 => ItoStatus::Config,
        3 => ItoStatus::Numeric,
        _ => ItoStatus::Format,
    }
}

fn fail(status: ItoStatus, msg: &str) -> ItoStatus {
    set_error(msg);
    status
}

/// Runs `f` with panics converted into `Usage` and the message recorded.
fn guarded<F: FnOnce() -> ItoStatus>(f: F) -> ItoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(ItoStatus::Usage, "internal panic caught at the ABI boundary"),
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, ItoStatus> {
    if ptr.is_null() {
        return Err(fail(ItoStatus::Usage, &format!("{what} is a null pointer")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(ItoStatus::Usage, &format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ito_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failure on the calling thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ito_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Runs one pipeline stage (`simulate`, `train`, `sample`, `rollout`,
/// `analyze`, or `sweep`) from a JSON run configuration, writing artifacts
/// and the stage manifest under `out_dir`. `workers` of zero means one.
///
/// # Safety
/// All three pointers must be null or NUL-terminated strings valid for the
/// duration of the call.
#[no_mangle]
pub unsafe extern "C" fn ito_run_stage(
    stage: *const c_char,
    config_json: *const c_char,
    out_dir: *const c_char,
    workers: usize,
) -> ItoStatus {
    guarded(|| {
        let stage = match utf8_arg(stage, "stage") {
            Ok(s) => s,
            Err(code) => return code,
        };
        let config_json = match utf8_arg(config_json, "config_json") {
            Ok(s) => s,
            Err(code) => return code,
        };
        let out_dir = match utf8_arg(out_dir, "out_dir") {
            Ok(s) => s,
            Err(code) => return code,
        };
        let run = match stage {
            "simulate" => stages::cmd_simulate,
            "train" => stages::cmd_train,
            "sample" => stages::cmd_sample,
            "rollout" => stages::cmd_rollout,
            "analyze" => stages::cmd_analyze,
            "sweep" => stages::cmd_sweep,
            other => {
                return fail(ItoStatus::Usage, &format!("unknown stage {other:?}"));
            }
        };
        let cfg = match RunConfig::parse(config_json) {
            Ok(c) => c,
            Err(e) => return fail(status_of(&e), &e.to_string()),
        };
        let out = Path::new(out_dir);
        if let Err(e) = std::fs::create_dir_all(out) {
            return fail(ItoStatus::Format, &format!("cannot create {out_dir}: {e}"));
        }
        let manifest: Result<RunManifest, ItoError> =
            run(&cfg, out, workers.max(1)).and_then(|mut man| {
                man.write(out)?;
                Ok(man)
            });
        match manifest {
            Ok(_) => ItoStatus::Ok,
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Reads a trajectory file; returns null on failure (see
/// `ito_last_error_message`).
///
/// # Safety
/// `path` must be null or a NUL-terminated string valid for the call.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_read(path: *const c_char) -> *mut ItoTrajectory {
    let r = catch_unwind(AssertUnwindSafe(|| {
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match read_trajectory(Path::new(path)) {
            Ok(t) => Box::into_raw(Box::new(ItoTrajectory { inner: t })),
            Err(e) => {
                fail(status_of(&e), &e.to_string());
                std::ptr::null_mut()
            }
        }
    }));
    match r {
        Ok(p) => p,
        Err(_) => {
            fail(ItoStatus::Usage, "internal panic caught at the ABI boundary");
            std::ptr::null_mut()
        }
    }
}

/// Writes the trajectory to `path` in the native binary format.
///
/// # Safety
/// `path` as in `ito_trajectory_read`; `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_write(
    path: *const c_char,
    traj: *const ItoTrajectory,
) -> ItoStatus {
    guarded(|| {
        let path = match utf8_arg(path, "path") {
            Ok(p) => p,
            Err(code) => return code,
        };
        let Some(t) = traj.as_ref() else {
            return fail(ItoStatus::Usage, "traj is a null pointer");
        };
        match write_trajectory(Path::new(path), &t.inner) {
            Ok(()) => ItoStatus::Ok,
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

unsafe fn with_traj<T>(traj: *const ItoTrajectory, default: T, f: impl FnOnce(&Trajectory) -> T) -> T {
    match traj.as_ref() {
        Some(t) => f(&t.inner),
        None => {
            set_error("traj is a null pointer");
            default
        }
    }
}

/// Number of saved frames; zero for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_n_frames(traj: *const ItoTrajectory) -> usize {
    with_traj(traj, 0, |t| t.n_frames())
}

/// Particles per frame; zero for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_n_particles(traj: *const ItoTrajectory) -> usize {
    with_traj(traj, 0, |t| t.n_particles())
}

/// Spatial dimension per particle; zero for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_dim(traj: *const ItoTrajectory) -> usize {
    with_traj(traj, 0, |t| t.dim())
}

/// Physical time between saved frames; NaN for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_frame_interval(traj: *const ItoTrajectory) -> f64 {
    with_traj(traj, f64::NAN, |t| t.frame_interval)
}

/// Simulation temperature; NaN for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_temperature(traj: *const ItoTrajectory) -> f64 {
    with_traj(traj, f64::NAN, |t| t.temperature)
}

/// Copies all frames into `out` in row-major (frame, particle, axis) order.
/// `len` must equal `n_frames * n_particles * dim`.
///
/// # Safety
/// `traj` must be null or a live handle; `out` must be null or valid for
/// `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_copy_frames(
    traj: *const ItoTrajectory,
    out: *mut f64,
    len: usize,
) -> ItoStatus {
    guarded(|| {
        let Some(t) = traj.as_ref() else {
            return fail(ItoStatus::Usage, "traj is a null pointer");
        };
        if out.is_null() {
            return fail(ItoStatus::Usage, "out is a null pointer");
        }
        let t = &t.inner;
        let need = t.n_frames() * t.n_particles() * t.dim();
        if len != need {
            return fail(
                ItoStatus::Usage,
                &format!("out has {len} slots, trajectory needs {need}"),
            );
        }
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, s) in dst.iter_mut().zip(t.frames.iter()) {
            *d = *s;
        }
        ItoStatus::Ok
    })
}

/// Releases a handle returned by `ito_trajectory_read`. Null is a no-op.
///
/// # Safety
/// `traj` must be null or a live handle, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ito_trajectory_free(traj: *mut ItoTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}
