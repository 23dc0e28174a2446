//! C ABI over the simulator.
//!
//! Every function returns a [`FedapcStatus`]. On failure a description is
//! kept per thread and can be read with [`fedapc_last_error`]. Objects are
//! opaque handles released with their matching `*_free` function.
//!
//! Copy-out functions take `(buf, cap, out_len)`: `*out_len` always receives
//! the required element count, and a null or short `buf` yields
//! `FEDAPC_STATUS_BUFFER_TOO_SMALL` without writing.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fedapc::data::{parse_idx, DataError, IdxArray};
use fedapc::federation::{decode, encode, Payload, RoundMessage, WireError};
use fedapc::harness::{run_experiment, ExperimentConfig, ExperimentResult, HarnessError, Method};
use fedapc::loss::apc_loss;
use fedapc::prototype::{Owner, PrototypeSet};
use fedapc::Tensor;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedapcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Truncated = 3,
    BadVersion = 4,
    UnknownKind = 5,
    TrailingBytes = 6,
    BadMagic = 7,
    BadConfig = 8,
    Io = 9,
    BufferTooSmall = 10,
    NotRun = 11,
    Runtime = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedapcMessageKind {
    Broadcast = 1,
    Update = 2,
    Shutdown = 3,
}

/// A decoded round message.
pub struct FedapcMessage(RoundMessage);

/// An experiment config plus, once run, its results.
pub struct FedapcExperiment {
    config: ExperimentConfig,
    result: Option<ExperimentResult>,
}

/// A parsed IDX array.
pub struct FedapcIdx(IdxArray);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: FedapcStatus, msg: impl Into<String>) -> FedapcStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> FedapcStatus) -> FedapcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == FedapcStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(FedapcStatus::Panic, "internal panic"),
    }
}

fn wire_status(e: &WireError) -> FedapcStatus {
    match e {
        WireError::Truncated => FedapcStatus::Truncated,
        WireError::BadMagicVersion(_) => FedapcStatus::BadVersion,
        WireError::UnknownKind(_) => FedapcStatus::UnknownKind,
        WireError::TrailingBytes(_) => FedapcStatus::TrailingBytes,
        WireError::TooLarge(_) | WireError::FrameTooLarge(_) => FedapcStatus::InvalidArgument,
        WireError::Io(_) => FedapcStatus::Io,
    }
}

fn data_status(e: &DataError) -> FedapcStatus {
    match e {
        DataError::Truncated => FedapcStatus::Truncated,
        DataError::BadMagic(_) => FedapcStatus::BadMagic,
        DataError::TrailingBytes(_) => FedapcStatus::TrailingBytes,
        DataError::Io { .. } => FedapcStatus::Io,
        _ => FedapcStatus::InvalidArgument,
    }
}

fn harness_status(e: &HarnessError) -> FedapcStatus {
    match e {
        HarnessError::BadConfig { .. } => FedapcStatus::BadConfig,
        HarnessError::Io { .. } => FedapcStatus::Io,
        HarnessError::Data(d) => data_status(d),
        _ => FedapcStatus::Runtime,
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, cap: usize, out_len: *mut usize) -> FedapcStatus {
    if out_len.is_null() {
        return fail(FedapcStatus::NullPointer, "out_len is null");
    }
    *out_len = src.len();
    if src.is_empty() {
        return FedapcStatus::Ok;
    }
    if buf.is_null() || cap < src.len() {
        return fail(FedapcStatus::BufferTooSmall, format!("need {} elements", src.len()));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    FedapcStatus::Ok
}

unsafe fn c_str<'a>(ptr: *const c_char) -> Result<&'a str, FedapcStatus> {
    if ptr.is_null() {
        return Err(fail(FedapcStatus::NullPointer, "string argument is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(FedapcStatus::InvalidArgument, "string is not UTF-8"))
}

/// Description of the last failure on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fedapc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedapc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- wire messages ----

#[no_mangle]
pub unsafe extern "C" fn fedapc_message_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut FedapcMessage,
) -> FedapcStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedapcStatus::NullPointer, "out is null");
        }
        let Some(bytes) = slice(bytes, len) else {
            return fail(FedapcStatus::NullPointer, "bytes is null");
        };
        match decode(bytes) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(FedapcMessage(m)));
                FedapcStatus::Ok
            }
            Err(e) => fail(wire_status(&e), e.to_string()),
        }
    })
}

/// A BROADCAST carrying `params` and no prototypes.
#[no_mangle]
pub unsafe extern "C" fn fedapc_message_new_broadcast(
    round: u32,
    params: *const f64,
    count: usize,
    out: *mut *mut FedapcMessage,
) -> FedapcStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedapcStatus::NullPointer, "out is null");
        }
        let Some(params) = slice(params, count) else {
            return fail(FedapcStatus::NullPointer, "params is null");
        };
        let msg = RoundMessage::broadcast(round, params.to_vec(), PrototypeSet::empty(Owner::Global, 0));
        *out = Box::into_raw(Box::new(FedapcMessage(msg)));
        FedapcStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedapc_message_new_shutdown(round: u32, out: *mut *mut FedapcMessage) -> FedapcStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedapcStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(FedapcMessage(RoundMessage::shutdown(round))));
        FedapcStatus::Ok
    })
}

/// Encoded frame bytes, length prefix included.
#[no_mangle]
pub unsafe extern "C" fn fedapc_message_encode(
    msg: *const FedapcMessage,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> FedapcStatus {
    guard(|| {
        let Some(msg) = msg.as_ref() else {
            return fail(FedapcStatus::NullPointer, "msg is null");
        };
        match encode(&msg.0) {
            Ok(bytes) => copy_out(&bytes, buf, cap, out_len),
            Err(e) => fail(wire_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedapc_message_kind(msg: *const FedapcMessage, out: *mut FedapcMessageKind) -> FedapcStatus {
    guard(|| match (msg.as_ref(), out.is_null()) {
        (Some(m), false) => {
            *out = match m.0.payload {
                Payload::Broadcast { .. } => FedapcMessageKind::Broadcast,
                Payload::Update { .. } => FedapcMessageKind::Update,
                Payload::Shutdown => FedapcMessageKind::Shutdown,
            };
            FedapcStatus::Ok
        }
        _ => fail(FedapcStatus::NullPointer, "null argument"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedapc_message_round(msg: *const FedapcMessage, out: *mut u32) -> FedapcStatus {
    guard(|| match (msg.as_ref(), out.is_null()) {
        (Some(m), false) => {
            *out = m.0.round;
            FedapcStatus::Ok
        }
        _ => fail(FedapcStatus::NullPointer, "null argument"),
    })
}

/// Sender id of an UPDATE; other kinds give `FEDAPC_STATUS_INVALID_ARGUMENT`.
#[no_mangle]
pub unsafe extern "C" fn fedapc_message_client_id(msg: *const FedapcMessage, out: *mut u32) -> FedapcStatus {
    guard(|| match (msg.as_ref(), out.is_null()) {
        (Some(FedapcMessage(RoundMessage {
            payload: Payload::Update { client_id, .. },
            ..
        })), false) => {
            *out = *client_id;
            FedapcStatus::Ok
        }
        (Some(_), false) => fail(FedapcStatus::InvalidArgument, "not an UPDATE message"),
        _ => fail(FedapcStatus::NullPointer, "null argument"),
    })
}

/// Model parameters of a BROADCAST or UPDATE; SHUTDOWN has none.
#[no_mangle]
pub unsafe extern "C" fn fedapc_message_params(
    msg: *const FedapcMessage,
    buf: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> FedapcStatus {
    guard(|| {
        let Some(msg) = msg.as_ref() else {
            return fail(FedapcStatus::NullPointer, "msg is null");
        };
        let params: &[f64] = match &msg.0.payload {
            Payload::Broadcast { params, .. } | Payload::Update { params, .. } => params,
            Payload::Shutdown => &[],
        };
        copy_out(params, buf, cap, out_len)
    })
}

/// Number of class prototypes carried by the message.
#[no_mangle]
pub unsafe extern "C" fn fedapc_message_prototype_count(msg: *const FedapcMessage, out: *mut usize) -> FedapcStatus {
    guard(|| match (msg.as_ref(), out.is_null()) {
        (Some(m), false) => {
            *out = match &m.0.payload {
                Payload::Broadcast { prototypes, .. } | Payload::Update { prototypes, .. } => prototypes.len(),
                Payload::Shutdown => 0,
            };
            FedapcStatus::Ok
        }
        _ => fail(FedapcStatus::NullPointer, "null argument"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedapc_message_free(msg: *mut FedapcMessage) {
    if !msg.is_null() {
        drop(Box::from_raw(msg));
    }
}

// ---- experiments ----

/// Parses and validates a JSON experiment config.
#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_from_json(json: *const c_char, out: *mut *mut FedapcExperiment) -> FedapcStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedapcStatus::NullPointer, "out is null");
        }
        let text = match c_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_json(text) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(FedapcExperiment { config, result: None }));
                FedapcStatus::Ok
            }
            Err(e) => fail(harness_status(&e), e.to_string()),
        }
    })
}

/// The built-in synthetic benchmark for `method` ("fedavg", "fedproto" or "fedapc").
#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_default(method: *const c_char, out: *mut *mut FedapcExperiment) -> FedapcStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedapcStatus::NullPointer, "out is null");
        }
        let method = match c_str(method) {
            Ok("fedavg") => Method::Fedavg,
            Ok("fedproto") => Method::Fedproto,
            Ok("fedapc") => Method::Fedapc,
            Ok(other) => return fail(FedapcStatus::InvalidArgument, format!("unknown method {other:?}")),
            Err(s) => return s,
        };
        let config = ExperimentConfig::default_synthetic(method);
        *out = Box::into_raw(Box::new(FedapcExperiment { config, result: None }));
        FedapcStatus::Ok
    })
}

/// Overrides rounds and seeds before running. `seeds` may be null when
/// `seed_count` is 0 to keep the configured list.
#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_set_schedule(
    exp: *mut FedapcExperiment,
    rounds: u32,
    seeds: *const u64,
    seed_count: usize,
) -> FedapcStatus {
    guard(|| {
        let Some(exp) = exp.as_mut() else {
            return fail(FedapcStatus::NullPointer, "exp is null");
        };
        let Some(seeds) = slice(seeds, seed_count) else {
            return fail(FedapcStatus::NullPointer, "seeds is null");
        };
        let mut next = exp.config.clone();
        next.rounds = rounds;
        next.report_last = next.report_last.min(rounds.max(1));
        if !seeds.is_empty() {
            next.seeds = seeds.to_vec();
        }
        if let Err(e) = next.validate() {
            return fail(harness_status(&e), e.to_string());
        }
        exp.config = next;
        exp.result = None;
        FedapcStatus::Ok
    })
}

/// Runs the experiment. `out_dir` may be null to skip writing files.
#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_run(exp: *mut FedapcExperiment, out_dir: *const c_char) -> FedapcStatus {
    guard(|| {
        let Some(exp) = exp.as_mut() else {
            return fail(FedapcStatus::NullPointer, "exp is null");
        };
        let dir = if out_dir.is_null() {
            None
        } else {
            match c_str(out_dir) {
                Ok(d) => Some(Path::new(d)),
                Err(s) => return s,
            }
        };
        match run_experiment(&exp.config, dir) {
            Ok(r) => {
                exp.result = Some(r);
                FedapcStatus::Ok
            }
            Err(e) => fail(harness_status(&e), e.to_string()),
        }
    })
}

/// Summary average accuracy of a finished run.
#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_average(exp: *const FedapcExperiment, out: *mut f64) -> FedapcStatus {
    guard(|| match (exp.as_ref(), out.is_null()) {
        (Some(FedapcExperiment { result: Some(r), .. }), false) => {
            *out = r.summary.average;
            FedapcStatus::Ok
        }
        (Some(_), false) => fail(FedapcStatus::NotRun, "experiment has not been run"),
        _ => fail(FedapcStatus::NullPointer, "null argument"),
    })
}

/// Per-round average accuracy of every seed, in CSV row order.
#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_round_accuracies(
    exp: *const FedapcExperiment,
    buf: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> FedapcStatus {
    guard(|| match exp.as_ref() {
        Some(FedapcExperiment { result: Some(r), .. }) => {
            let accs: Vec<f64> = r.rows.iter().map(|row| row.avg_acc).collect();
            copy_out(&accs, buf, cap, out_len)
        }
        Some(_) => fail(FedapcStatus::NotRun, "experiment has not been run"),
        None => fail(FedapcStatus::NullPointer, "exp is null"),
    })
}

/// `metrics.csv` contents as bytes (no terminating NUL).
#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_metrics_csv(
    exp: *const FedapcExperiment,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> FedapcStatus {
    guard(|| match exp.as_ref() {
        Some(FedapcExperiment { result: Some(r), .. }) => copy_out(r.csv().as_bytes(), buf, cap, out_len),
        Some(_) => fail(FedapcStatus::NotRun, "experiment has not been run"),
        None => fail(FedapcStatus::NullPointer, "exp is null"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedapc_experiment_free(exp: *mut FedapcExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

// ---- IDX ----

#[no_mangle]
pub unsafe extern "C" fn fedapc_idx_parse(bytes: *const u8, len: usize, out: *mut *mut FedapcIdx) -> FedapcStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedapcStatus::NullPointer, "out is null");
        }
        let Some(bytes) = slice(bytes, len) else {
            return fail(FedapcStatus::NullPointer, "bytes is null");
        };
        match parse_idx(bytes) {
            Ok(a) => {
                *out = Box::into_raw(Box::new(FedapcIdx(a)));
                FedapcStatus::Ok
            }
            Err(e) => fail(data_status(&e), e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedapc_idx_magic(idx: *const FedapcIdx, out: *mut u32) -> FedapcStatus {
    guard(|| match (idx.as_ref(), out.is_null()) {
        (Some(a), false) => {
            *out = a.0.magic;
            FedapcStatus::Ok
        }
        _ => fail(FedapcStatus::NullPointer, "null argument"),
    })
}

/// Dimension sizes, outermost (item count) first.
#[no_mangle]
pub unsafe extern "C" fn fedapc_idx_dims(idx: *const FedapcIdx, buf: *mut usize, cap: usize, out_len: *mut usize) -> FedapcStatus {
    guard(|| match idx.as_ref() {
        Some(a) => copy_out(&a.0.dims, buf, cap, out_len),
        None => fail(FedapcStatus::NullPointer, "idx is null"),
    })
}

/// Raw payload bytes.
#[no_mangle]
pub unsafe extern "C" fn fedapc_idx_data(idx: *const FedapcIdx, buf: *mut u8, cap: usize, out_len: *mut usize) -> FedapcStatus {
    guard(|| match idx.as_ref() {
        Some(a) => copy_out(&a.0.data, buf, cap, out_len),
        None => fail(FedapcStatus::NullPointer, "idx is null"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn fedapc_idx_free(idx: *mut FedapcIdx) {
    if !idx.is_null() {
        drop(Box::from_raw(idx));
    }
}

// ---- losses ----

/// Contrastive prototype loss of `rows × dim` features (row-major) against
/// `proto_count` prototypes (`proto_count × dim`, row-major) whose class ids
/// are `proto_classes`. Rows whose label has no prototype are skipped.
#[no_mangle]
pub unsafe extern "C" fn fedapc_apc_loss(
    features: *const f64,
    rows: usize,
    dim: usize,
    labels: *const u32,
    prototypes: *const f64,
    proto_classes: *const u32,
    proto_count: usize,
    temperature: f64,
    out: *mut f64,
) -> FedapcStatus {
    guard(|| {
        if out.is_null() {
            return fail(FedapcStatus::NullPointer, "out is null");
        }
        let (Some(f), Some(l), Some(p), Some(c)) = (
            slice(features, rows.saturating_mul(dim)),
            slice(labels, rows),
            slice(prototypes, proto_count.saturating_mul(dim)),
            slice(proto_classes, proto_count),
        ) else {
            return fail(FedapcStatus::NullPointer, "null array argument");
        };
        let features = match Tensor::matrix(rows, dim, f.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(FedapcStatus::InvalidArgument, e.to_string()),
        };
        let mut globals = PrototypeSet::empty(Owner::Global, dim);
        for (i, class) in c.iter().enumerate() {
            if globals.contains(*class as usize) {
                return fail(FedapcStatus::InvalidArgument, format!("duplicate prototype class {class}"));
            }
            if let Err(e) = globals.insert(*class as usize, p[i * dim..(i + 1) * dim].to_vec(), 1) {
                return fail(FedapcStatus::InvalidArgument, e.to_string());
            }
        }
        let labels: Vec<usize> = l.iter().map(|v| *v as usize).collect();
        match apc_loss(&features, &labels, &globals, temperature) {
            Ok(loss) => {
                *out = loss.value.item();
                FedapcStatus::Ok
            }
            Err(e) => fail(FedapcStatus::InvalidArgument, e.to_string()),
        }
    })
}
