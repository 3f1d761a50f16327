//! C ABI for the spikerate engine.
//!
//! Every fallible function returns an [`SpkStatus`]; on failure the message is
//! kept per thread and can be fetched with [`spk_last_error_message`]. Objects
//! are opaque handles created by `*_new`/`*_load` and released by `*_free`.
//!
//! Weight buffers use the (post, pre, k) index order of checkpoints; activity
//! windows are `k` frames of `pre` values, newest frame first.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use libc::{c_char, size_t};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikerate::eval::EvalReport;
use spikerate::learn::{apply_d, apply_u};
use spikerate::net::{compute_drive, Gate};
use spikerate::oracle::run_bernoulli_benchmark;
use spikerate::{Architecture, Checkpoint, DelayedWeightTensor, Error, HistoryWindow, Network, TimestepFrame};
use spikerate::{TrainConfig, Trainer};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Bounds = 3,
    Ordering = 4,
    Gap = 5,
    InsufficientHistory = 6,
    Numeric = 7,
    Parse = 8,
    Undefined = 9,
    Io = 10,
    Panic = 11,
}

impl From<&Error> for SpkStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Ordering { .. } => SpkStatus::Ordering,
            Error::Bounds { .. } => SpkStatus::Bounds,
            Error::Gap { .. } => SpkStatus::Gap,
            Error::InsufficientHistory { .. } => SpkStatus::InsufficientHistory,
            Error::Numeric(_) => SpkStatus::Numeric,
            Error::Config(_) => SpkStatus::InvalidArgument,
            Error::Parse { .. } => SpkStatus::Parse,
            Error::UndefinedRate | Error::UndefinedMetric(_) => SpkStatus::Undefined,
            Error::Io(_) => SpkStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Fail(SpkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(SpkStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SpkStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SpkStatus::InvalidArgument, msg.into())
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> SpkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpkStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside spikerate".into());
            SpkStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn read_slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn read_str(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// Copies the calling thread's last error message, or returns NULL when the
/// previous call succeeded. Release the string with [`spk_string_free`].
#[no_mangle]
pub extern "C" fn spk_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_deref() {
        Some(msg) => CString::new(msg.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    })
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn spk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn spk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque network handle.
pub struct SpkNetwork {
    net: Network,
}

/// Opaque trainer handle.
pub struct SpkTrainer {
    trainer: Trainer,
}

/// Evaluation summary; undefined entries are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpkEvalReport {
    pub timesteps: size_t,
    pub recordings: size_t,
    pub timestep_accuracy: f64,
    pub recording_accuracy: f64,
    pub inference_sse: f64,
    pub prediction_sse: f64,
}

impl From<&EvalReport> for SpkEvalReport {
    fn from(r: &EvalReport) -> Self {
        SpkEvalReport {
            timesteps: r.timesteps,
            recordings: r.recordings,
            timestep_accuracy: r.timestep_accuracy.unwrap_or(f64::NAN),
            recording_accuracy: r.recording_accuracy.unwrap_or(f64::NAN),
            inference_sse: r.inference_sse.unwrap_or(f64::NAN),
            prediction_sse: r.prediction_sse.unwrap_or(f64::NAN),
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpkBernoulliResult {
    pub final_q: f64,
    pub oracle_rate: f64,
    pub tail_mean: f64,
    pub tail_std: f64,
}

/// Creates a network with uniform `[0, init_scale)` layer weights and zero heads.
///
/// # Safety
/// `hidden` must point to `hidden_len` sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spk_network_new(
    input: size_t,
    hidden: *const size_t,
    hidden_len: size_t,
    classes: size_t,
    k: size_t,
    tau_us: u64,
    init_scale: f64,
    seed: u64,
    out: *mut *mut SpkNetwork,
) -> SpkStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        if hidden.is_null() && hidden_len > 0 {
            return Err(null("hidden"));
        }
        let hidden = if hidden_len == 0 { Vec::new() } else { slice::from_raw_parts(hidden, hidden_len).to_vec() };
        let arch = Architecture {
            input,
            hidden,
            classes,
            k,
            tau_us,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(arch, init_scale, &mut rng)?;
        *out = Box::into_raw(Box::new(SpkNetwork { net }));
        Ok(())
    })
}

/// Loads the network stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spk_network_load(path: *const c_char, out: *mut *mut SpkNetwork) -> SpkStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let path = PathBuf::from(read_str(path, "path")?);
        let net = Checkpoint::load(&path)?.network;
        *out = Box::into_raw(Box::new(SpkNetwork { net }));
        Ok(())
    })
}

/// Writes the network as a checkpoint at the start of a schedule.
///
/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spk_network_save(net: *const SpkNetwork, path: *const c_char) -> SpkStatus {
    guard(|| {
        let net = borrow(net, "net")?;
        let path = PathBuf::from(read_str(path, "path")?);
        let ck = Checkpoint {
            network: net.net.clone(),
            progress: spikerate::checkpoint::Progress {
                pass: 0,
                layer: 0,
                timestep: 0,
                eps_layers: 0.0,
                eps_heads: 0.0,
                rng: spikerate::checkpoint::RngState {
                    algorithm: "chacha8".into(),
                    seed: 0,
                },
            },
            config: None,
        };
        ck.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `net` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spk_network_free(net: *mut SpkNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Silences every history window and rewinds time to before step 0.
///
/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spk_network_reset(net: *mut SpkNetwork) -> SpkStatus {
    guard(|| {
        borrow_mut(net, "net")?.net.reset();
        Ok(())
    })
}

/// Number of hidden layers.
///
/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spk_network_hidden_count(net: *const SpkNetwork) -> size_t {
    net.as_ref().map_or(0, |n| n.net.hidden_count())
}

/// Advances the network one timestep on `input` (length = input layer size).
/// Hidden activity is scaled by `retention` (1 for none).
///
/// # Safety
/// `net` must be a live handle and `input` point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn spk_network_step(
    net: *mut SpkNetwork,
    input: *const f64,
    len: size_t,
    retention: f64,
) -> SpkStatus {
    guard(|| {
        let net = &mut borrow_mut(net, "net")?.net;
        let values = read_slice(input, len, "input")?.to_vec();
        let frame = TimestepFrame::new(net.current_t() + 1, values)?;
        let gates = vec![Gate::Scale(retention); net.hidden_count()];
        net.forward_step(frame, &gates)?;
        Ok(())
    })
}

/// Copies the newest activity of `layer` (0 = input) into `out`.
///
/// # Safety
/// `net` must be a live handle and `out` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn spk_network_activity(
    net: *const SpkNetwork,
    layer: size_t,
    out: *mut f64,
    len: size_t,
) -> SpkStatus {
    guard(|| {
        let net = &borrow(net, "net")?.net;
        if layer > net.hidden_count() {
            return Err(Error::Bounds {
                index: layer,
                size: net.hidden_count() + 1,
            }
            .into());
        }
        let frame = net.window(layer).newest().ok_or_else(|| invalid("network has no history"))?;
        if frame.len() != len {
            return Err(Error::Bounds { index: len, size: frame.len() }.into());
        }
        write_slice(out, len, "out")?.copy_from_slice(&frame.values);
        Ok(())
    })
}

/// Builds a trainer from a TOML config string (same format as the CLI).
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spk_trainer_new(config_toml: *const c_char, out: *mut *mut SpkTrainer) -> SpkStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let text = read_str(config_toml, "config_toml")?;
        let config = TrainConfig::from_toml_str(&text, &[])?;
        let trainer = Trainer::new(config)?;
        *out = Box::into_raw(Box::new(SpkTrainer { trainer }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spk_trainer_free(trainer: *mut SpkTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs the remaining schedule. With a non-NULL `out_dir`, checkpoints and
/// the metrics log are written there.
///
/// # Safety
/// `trainer` must be a live handle; `out_dir` NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spk_trainer_run(trainer: *mut SpkTrainer, out_dir: *const c_char) -> SpkStatus {
    guard(|| {
        let t = &mut borrow_mut(trainer, "trainer")?.trainer;
        let dir = if out_dir.is_null() { None } else { Some(PathBuf::from(read_str(out_dir, "out_dir")?)) };
        t.run(dir.as_deref())?;
        Ok(())
    })
}

/// Saves the trainer state as a resumable checkpoint.
///
/// # Safety
/// `trainer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spk_trainer_save(trainer: *const SpkTrainer, path: *const c_char) -> SpkStatus {
    guard(|| {
        let t = &borrow(trainer, "trainer")?.trainer;
        let path = PathBuf::from(read_str(path, "path")?);
        t.checkpoint()?.save(&path)?;
        Ok(())
    })
}

/// Evaluates the trainer's network on its test split.
///
/// # Safety
/// `trainer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spk_trainer_evaluate(trainer: *const SpkTrainer, out: *mut SpkEvalReport) -> SpkStatus {
    guard(|| {
        let t = &borrow(trainer, "trainer")?.trainer;
        let out = borrow_mut(out, "out")?;
        let report = t.evaluate(&t.test_stream()?)?;
        *out = SpkEvalReport::from(&report);
        Ok(())
    })
}

/// Copies the trainer's current network into a new handle.
///
/// # Safety
/// `trainer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spk_trainer_network(trainer: *const SpkTrainer, out: *mut *mut SpkNetwork) -> SpkStatus {
    guard(|| {
        let t = &borrow(trainer, "trainer")?.trainer;
        let out = borrow_mut(out, "out")?;
        *out = Box::into_raw(Box::new(SpkNetwork { net: t.network.clone() }));
        Ok(())
    })
}

/// Single-context Bernoulli benchmark: learned rate versus empirical rate.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spk_bernoulli_benchmark(
    p: f64,
    steps: size_t,
    eps: f64,
    seed: u64,
    out: *mut SpkBernoulliResult,
) -> SpkStatus {
    guard(|| {
        let out = borrow_mut(out, "out")?;
        let run = run_bernoulli_benchmark(p, steps, eps, seed)?;
        *out = SpkBernoulliResult {
            final_q: run.final_q,
            oracle_rate: run.oracle_rate,
            tail_mean: run.tail_mean,
            tail_std: run.tail_std,
        };
        Ok(())
    })
}

unsafe fn tensor(weights: *const f64, pre: usize, post: usize, k: usize) -> Result<DelayedWeightTensor, Fail> {
    let n = pre.checked_mul(post).and_then(|v| v.checked_mul(k)).ok_or_else(|| invalid("shape overflows"))?;
    let values = read_slice(weights, n, "weights")?;
    Ok(DelayedWeightTensor::from_values("pre", "post", pre, post, k, values)?)
}

unsafe fn window(frames: *const f64, pre: usize, k: usize) -> Result<HistoryWindow, Fail> {
    let n = pre.checked_mul(k).ok_or_else(|| invalid("shape overflows"))?;
    let values = read_slice(frames, n, "window")?;
    let mut w = HistoryWindow::new(k);
    for (t, delay) in (0..k).rev().enumerate() {
        w.push(TimestepFrame::new(t as i64, values[delay * pre..(delay + 1) * pre].to_vec())?)?;
    }
    Ok(w)
}

unsafe fn store(t: &DelayedWeightTensor, weights: *mut f64) -> Result<(), Fail> {
    let vals = t.to_values();
    write_slice(weights, vals.len(), "weights")?.copy_from_slice(&vals);
    Ok(())
}

/// Drive `Q[j] = sum_i sum_k w[j,i,k] h_i(t-k)` into `q` (length `post`).
///
/// # Safety
/// `weights` holds `post*pre*k` values, `window` `k*pre`, `q` `post`.
#[no_mangle]
pub unsafe extern "C" fn spk_compute_drive(
    weights: *const f64,
    pre: size_t,
    post: size_t,
    k: size_t,
    window: *const f64,
    q: *mut f64,
) -> SpkStatus {
    guard(|| {
        let t = tensor(weights, pre, post, k)?;
        let w = self::window(window, pre, k)?;
        let drive = compute_drive(&t, &w)?;
        write_slice(q, post, "q")?.copy_from_slice(&drive);
        Ok(())
    })
}

/// The `d` rule in place: `w[j,i,k] -= eps * h_i(t-k) * q[j]`.
///
/// # Safety
/// `weights` holds `post*pre*k` values, `window` `k*pre`, `q` `post`.
#[no_mangle]
pub unsafe extern "C" fn spk_apply_d(
    weights: *mut f64,
    pre: size_t,
    post: size_t,
    k: size_t,
    window: *const f64,
    q: *const f64,
    eps: f64,
) -> SpkStatus {
    guard(|| {
        let mut t = tensor(weights, pre, post, k)?;
        let w = self::window(window, pre, k)?;
        apply_d(&mut t, &w, read_slice(q, post, "q")?, eps)?;
        store(&t, weights)
    })
}

/// The `u` rule in place: `w[j,i,k] += eps * h_i(t-k) * o[j]`.
///
/// # Safety
/// `weights` holds `post*pre*k` values, `window` `k*pre`, `o` `post`.
#[no_mangle]
pub unsafe extern "C" fn spk_apply_u(
    weights: *mut f64,
    pre: size_t,
    post: size_t,
    k: size_t,
    window: *const f64,
    o: *const f64,
    eps: f64,
) -> SpkStatus {
    guard(|| {
        let mut t = tensor(weights, pre, post, k)?;
        let w = self::window(window, pre, k)?;
        let sup = TimestepFrame::new(0, read_slice(o, post, "o")?.to_vec())?;
        apply_u(&mut t, &w, &sup, eps)?;
        store(&t, weights)
    })
}
