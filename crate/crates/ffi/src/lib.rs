//! C ABI over the `codistill` library.
//!
//! Conventions:
//!
//! * Every fallible function returns a [`CdStatus`]; its numeric values for
//!   library errors match the CLI exit codes.
//! * After a non-OK status, [`cd_last_error`] returns a message for the
//!   calling thread. The pointer stays valid until the next failing call on
//!   that thread.
//! * Objects are opaque handles created by `*_new`/`*_load`/`*_init`-style
//!   functions and released by the matching `*_free`. Passing NULL to a
//!   `*_free` function is a no-op.
//! * Strings returned as `char *` are owned by the caller and must be released
//!   with [`cd_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use libc::{c_char, size_t};

use codistill::checkpoint;
use codistill::config::RunConfig;
use codistill::gradcheck;
use codistill::nn::{ArchSpec, NetworkState};
use codistill::run;
use codistill::train::RunReport;
use codistill::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    /// I/O or shape error.
    Other = 1,
    Config = 2,
    Format = 3,
    Diverged = 4,
    Gradcheck = 5,
    /// A required pointer argument was NULL.
    NullArgument = 6,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 7,
    /// An index or buffer length was out of range.
    OutOfRange = 8,
    /// The library panicked; this is a bug.
    Panic = 9,
}

/// Run configuration.
pub struct CdConfig {
    inner: RunConfig,
}

/// Summary of a finished training run.
pub struct CdReport {
    inner: RunReport,
}

/// One network with its parameters.
pub struct CdNetwork {
    inner: NetworkState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => CdStatus::Config,
            3 => CdStatus::Format,
            4 => CdStatus::Diverged,
            5 => CdStatus::Gradcheck,
            _ => CdStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            CdStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CdStatus::NullArgument, format!("{what} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CdStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message describing the last failure on this thread, or NULL.
#[no_mangle]
pub extern "C" fn cd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn cd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_config_from_toml(toml: *const c_char, out_config: *mut *mut CdConfig) -> CdStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let inner = RunConfig::from_toml_str(text)?;
        inner.validate()?;
        out(out_config, Box::into_raw(Box::new(CdConfig { inner })), "out_config")
    })
}

/// Reads a TOML configuration file, applying the output-directory environment override.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_config_load(path: *const c_char, out_config: *mut *mut CdConfig) -> CdStatus {
    guard(|| {
        let inner = RunConfig::load(str_arg(path, "path")?)?;
        out(out_config, Box::into_raw(Box::new(CdConfig { inner })), "out_config")
    })
}

/// # Safety
/// `config` must be a valid handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_config_set_output_dir(config: *mut CdConfig, dir: *const c_char) -> CdStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        cfg.inner.output_dir = PathBuf::from(str_arg(dir, "dir")?);
        Ok(())
    })
}

/// The configuration rendered back to TOML.
///
/// # Safety
/// `config` must be a valid handle; `out_toml` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_config_to_toml(config: *const CdConfig, out_toml: *mut *mut c_char) -> CdStatus {
    guard(|| {
        let text = handle(config, "config")?.inner.to_toml_string()?;
        out(out_toml, into_c_string(text), "out_toml")
    })
}

/// # Safety
/// `config` must be NULL or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn cd_config_free(config: *mut CdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Trains the configured strategy, writing metrics, report and checkpoint
/// into the configured output directory.
///
/// # Safety
/// `config` must be a valid handle; `out_report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_train(config: *const CdConfig, out_report: *mut *mut CdReport) -> CdStatus {
    guard(|| {
        let inner = run::run_to_dir(&handle(config, "config")?.inner)?;
        out(out_report, Box::into_raw(Box::new(CdReport { inner })), "out_report")
    })
}

/// # Safety
/// `report` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn cd_report_num_nets(report: *const CdReport) -> size_t {
    report.as_ref().map_or(0, |r| r.inner.nets.len())
}

/// # Safety
/// `report` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn cd_report_iterations(report: *const CdReport) -> u64 {
    report.as_ref().map_or(0, |r| r.inner.iterations)
}

/// # Safety
/// `report` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn cd_report_teacher_switches(report: *const CdReport) -> u64 {
    report.as_ref().map_or(0, |r| r.inner.teacher_switches)
}

/// Final and best test accuracy (percent) of network `net`.
///
/// # Safety
/// `report` must be a valid handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_report_accuracy(
    report: *const CdReport,
    net: size_t,
    out_final: *mut f64,
    out_best: *mut f64,
) -> CdStatus {
    guard(|| {
        let r = &handle(report, "report")?.inner;
        let n = r
            .nets
            .get(net)
            .ok_or_else(|| Failure(CdStatus::OutOfRange, format!("net {net} out of range ({})", r.nets.len())))?;
        out(out_final, n.final_accuracy, "out_final")?;
        out(out_best, n.best_accuracy, "out_best")
    })
}

/// The full report as JSON.
///
/// # Safety
/// `report` must be a valid handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_report_to_json(report: *const CdReport, out_json: *mut *mut c_char) -> CdStatus {
    guard(|| {
        let r = &handle(report, "report")?.inner;
        let text = serde_json::to_string(r).map_err(|e| Failure(CdStatus::Other, e.to_string()))?;
        out(out_json, into_c_string(text), "out_json")
    })
}

/// # Safety
/// `report` must be NULL or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn cd_report_free(report: *mut CdReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Finite-difference check of the loss gradients. Writes the max relative
/// error of L_C, L_D and L_F (in that order) into `out_errors[0..3]` and
/// returns `CD_STATUS_GRADCHECK` when any exceeds the tolerance.
///
/// # Safety
/// `out_errors` must be NULL or point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cd_gradcheck(seed: u64, out_errors: *mut f64) -> CdStatus {
    guard(|| {
        let report = gradcheck::run(seed)?;
        if !out_errors.is_null() {
            for (i, c) in report.checks.iter().enumerate() {
                out_errors.add(i).write(c.max_rel_err);
            }
        }
        report.into_result()?;
        Ok(())
    })
}

/// Index of the smallest loss, ties to the lowest index.
///
/// # Safety
/// `losses` must point to `n` doubles; `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_elect_teacher(losses: *const f64, n: size_t, out_index: *mut size_t) -> CdStatus {
    guard(|| {
        if losses.is_null() {
            return Err(null("losses"));
        }
        let t = codistill::elect_teacher(std::slice::from_raw_parts(losses, n))?;
        out(out_index, t, "out_index")
    })
}

/// Initializes a network from a JSON architecture description such as
/// `{"kind":"mlp","input_shape":[8],"layer_sizes":[16],"num_classes":4}`.
///
/// # Safety
/// `arch_json` must be a NUL-terminated string; `out_network` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_network_init(
    arch_json: *const c_char,
    seed: u64,
    net_id: size_t,
    out_network: *mut *mut CdNetwork,
) -> CdStatus {
    guard(|| {
        let arch: ArchSpec = serde_json::from_str(str_arg(arch_json, "arch_json")?)
            .map_err(|e| Failure(CdStatus::Config, format!("bad architecture: {e}")))?;
        let inner = NetworkState::init(&arch, seed, net_id)?;
        out(out_network, Box::into_raw(Box::new(CdNetwork { inner })), "out_network")
    })
}

/// Number of networks stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_checkpoint_count(path: *const c_char, out_count: *mut size_t) -> CdStatus {
    guard(|| {
        let nets = checkpoint::read(str_arg(path, "path")?)?;
        out(out_count, nets.len(), "out_count")
    })
}

/// Loads network `index` from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_network` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_checkpoint_load(path: *const c_char, index: size_t, out_network: *mut *mut CdNetwork) -> CdStatus {
    guard(|| {
        let mut nets = checkpoint::read(str_arg(path, "path")?)?;
        if index >= nets.len() {
            return Err(Failure(
                CdStatus::OutOfRange,
                format!("network {index} out of range ({})", nets.len()),
            ));
        }
        let inner = nets.swap_remove(index);
        out(out_network, Box::into_raw(Box::new(CdNetwork { inner })), "out_network")
    })
}

/// Flattened input size of one sample.
///
/// # Safety
/// `network` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn cd_network_input_dim(network: *const CdNetwork) -> size_t {
    network.as_ref().map_or(0, |n| n.inner.arch.input_dim())
}

/// # Safety
/// `network` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn cd_network_num_classes(network: *const CdNetwork) -> size_t {
    network.as_ref().map_or(0, |n| n.inner.arch.num_classes)
}

/// # Safety
/// `network` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn cd_network_num_parameters(network: *const CdNetwork) -> size_t {
    network.as_ref().map_or(0, |n| n.inner.num_parameters())
}

/// Class probabilities for `batch` samples laid out row-major in `inputs`
/// (`batch * input_dim` doubles). Writes `batch * num_classes` doubles.
///
/// # Safety
/// `inputs` must hold `batch * input_dim` doubles and `out_probs` must have
/// room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cd_network_forward(
    network: *const CdNetwork,
    inputs: *const f64,
    batch: size_t,
    out_probs: *mut f64,
    out_len: size_t,
) -> CdStatus {
    guard(|| {
        let net = &handle(network, "network")?.inner;
        if inputs.is_null() {
            return Err(null("inputs"));
        }
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        let (d, k) = (net.arch.input_dim(), net.arch.num_classes);
        if batch == 0 || out_len < batch * k {
            return Err(Failure(
                CdStatus::OutOfRange,
                format!("need batch >= 1 and out_len >= {} (got batch {batch}, out_len {out_len})", batch * k),
            ));
        }
        let x = std::slice::from_raw_parts(inputs, batch * d).to_vec();
        let mut shape = vec![batch];
        shape.extend(&net.arch.input_shape);
        let rec = net.forward(&Tensor::new(shape, x)?)?;
        std::slice::from_raw_parts_mut(out_probs, batch * k).copy_from_slice(rec.probs.data());
        Ok(())
    })
}

/// # Safety
/// `network` must be NULL or a handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn cd_network_free(network: *mut CdNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}
