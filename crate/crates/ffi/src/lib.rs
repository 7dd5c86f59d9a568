//! C ABI over the edropout network, energy and pruning-state primitives.
//!
//! Every fallible call returns an [`EdStatus`]; on failure a message is kept
//! per thread and can be read with [`ed_last_error`]. Handles are opaque and
//! must be released with their matching `_free` function. Pruning masks are
//! passed as one byte per prunable unit (0 = dropped, anything else = kept);
//! a null mask means the full network.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use edropout::checkpoint::Checkpoint;
use edropout::energy::{class_energies, energy_loss};
use edropout::nn::presets;
use edropout::{Error, Network, PruningState, Tensor, UnitMap};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Panic = 6,
}

/// A network together with its unit map and an optional stored best state.
pub struct EdNetwork {
    net: Network,
    units: Option<UnitMap>,
    best_state: Option<PruningState>,
    seed: u64,
    counter: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> EdStatus {
    match err {
        Error::Io(_) => EdStatus::Io,
        Error::Shape { .. } | Error::StateLength { .. } => EdStatus::ShapeMismatch,
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::Checkpoint(_)
        | Error::StateParse(_) => EdStatus::Format,
        _ => EdStatus::InvalidArgument,
    }
}

#[derive(Debug)]
struct Fail(EdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(EdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EdStatus::Panic
        }
    }
}

unsafe fn net_ref<'a>(h: *const EdNetwork) -> Result<&'a EdNetwork, Fail> {
    h.as_ref().ok_or_else(|| null("network"))
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| Fail(EdStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn read_mask(mask: *const u8, units: usize) -> Result<Option<PruningState>, Fail> {
    if mask.is_null() {
        return Ok(None);
    }
    let bytes = slice::from_raw_parts(mask, units);
    Ok(Some(PruningState::from_bits(bytes.iter().map(|&b| b != 0).collect())))
}

fn wrap(net: Network, best_state: Option<PruningState>, seed: u64, counter: u64) -> Box<EdNetwork> {
    let units = UnitMap::build(&net).ok();
    Box::new(EdNetwork { net, units, best_state, seed, counter })
}

/// Message for the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a preset network (`"toy10"`, `"smallcnn"` or `"mlp"`) for
/// `channels x height x width` inputs with freshly seeded weights.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ed_network_build_preset(
    name: *const c_char,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut EdNetwork,
) -> EdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let name = c_str(name, "name")?;
        let specs = presets::by_name(name, num_classes)
            .ok_or_else(|| Fail(EdStatus::InvalidArgument, format!("unknown preset {name:?}")))?;
        let net = Network::build(&specs, &[channels, height, width], num_classes, seed)?;
        *out = Box::into_raw(wrap(net, None, seed, 0));
        Ok(())
    })
}

/// Loads a checkpoint written by the `edropout` CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ed_network_load(path: *const c_char, out: *mut *mut EdNetwork) -> EdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let ckpt = Checkpoint::load(c_str(path, "path")?)?;
        *out = Box::into_raw(wrap(ckpt.net, ckpt.best_state, ckpt.seed, ckpt.counter));
        Ok(())
    })
}

/// Writes the network and its stored best state as a checkpoint.
///
/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ed_network_save(net: *const EdNetwork, path: *const c_char) -> EdStatus {
    guard(|| {
        let h = net_ref(net)?;
        let ckpt =
            Checkpoint { net: h.net.clone(), best_state: h.best_state.clone(), seed: h.seed, counter: h.counter };
        ckpt.save(c_str(path, "path")?)?;
        Ok(())
    })
}

/// Releases a network handle. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ed_network_free(net: *mut EdNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of prunable units D (the pruning-state length); 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ed_network_num_units(net: *const EdNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.num_units())
}

/// Number of classes C; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ed_network_num_classes(net: *const EdNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.num_classes())
}

/// Total trainable parameter count; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ed_network_num_params(net: *const EdNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.num_params())
}

/// Number of f64 values in one input sample (channels * height * width).
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ed_network_sample_len(net: *const EdNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.input_shape().iter().product())
}

/// Copies the stored best state into `mask_out` (one byte per unit).
/// Returns `ED_STATUS_INVALID_ARGUMENT` when the handle holds no best state.
///
/// # Safety
/// `mask_out` must hold `ed_network_num_units(net)` bytes.
#[no_mangle]
pub unsafe extern "C" fn ed_network_best_state(net: *const EdNetwork, mask_out: *mut u8) -> EdStatus {
    guard(|| {
        let h = net_ref(net)?;
        let state = h
            .best_state
            .as_ref()
            .ok_or_else(|| Fail(EdStatus::InvalidArgument, "network has no stored best state".into()))?;
        let out = out_slice(mask_out, state.len(), "mask_out")?;
        for (o, &b) in out.iter_mut().zip(state.bits()) {
            *o = u8::from(b);
        }
        Ok(())
    })
}

/// Computes logits for `batch` samples laid out row-major in `input`, writing
/// `batch * num_classes` values to `logits_out`.
///
/// # Safety
/// `input` must hold `batch * ed_network_sample_len(net)` values, `mask` must
/// be null or hold `ed_network_num_units(net)` bytes, and `logits_out` must
/// hold `batch * ed_network_num_classes(net)` values.
#[no_mangle]
pub unsafe extern "C" fn ed_network_forward(
    net: *const EdNetwork,
    input: *const f64,
    batch: usize,
    mask: *const u8,
    logits_out: *mut f64,
) -> EdStatus {
    guard(|| {
        let h = net_ref(net)?;
        let logits = forward(h, input, batch, mask)?;
        out_slice(logits_out, logits.data().len(), "logits_out")?.copy_from_slice(logits.data());
        Ok(())
    })
}

unsafe fn forward(h: &EdNetwork, input: *const f64, batch: usize, mask: *const u8) -> Result<Tensor, Fail> {
    let sample_len: usize = h.net.input_shape().iter().product();
    let data = in_slice(input, batch * sample_len, "input")?.to_vec();
    let mut shape = vec![batch];
    shape.extend_from_slice(h.net.input_shape());
    let x = Tensor::new(shape, data)?;
    let state = read_mask(mask, h.net.num_units())?;
    Ok(h.net.forward(&x, state.as_ref())?)
}

/// Mean energy loss of the network under `mask` on a labelled batch.
///
/// # Safety
/// Buffers as for [`ed_network_forward`]; `targets` must hold `batch` labels.
#[no_mangle]
pub unsafe extern "C" fn ed_network_energy(
    net: *const EdNetwork,
    input: *const f64,
    batch: usize,
    targets: *const u32,
    mask: *const u8,
    energy_out: *mut f64,
) -> EdStatus {
    guard(|| {
        let h = net_ref(net)?;
        let out = energy_out.as_mut().ok_or_else(|| null("energy_out"))?;
        let targets: Vec<usize> = in_slice(targets, batch, "targets")?.iter().map(|&t| t as usize).collect();
        let logits = forward(h, input, batch, mask)?;
        *out = energy_loss(&class_energies(&logits), &targets)?;
        Ok(())
    })
}

/// Mean energy loss for precomputed logits (`batch x classes`, row-major).
///
/// # Safety
/// `logits` must hold `batch * classes` values and `targets` `batch` labels.
#[no_mangle]
pub unsafe extern "C" fn ed_energy_loss(
    logits: *const f64,
    batch: usize,
    classes: usize,
    targets: *const u32,
    energy_out: *mut f64,
) -> EdStatus {
    guard(|| {
        let out = energy_out.as_mut().ok_or_else(|| null("energy_out"))?;
        let data = in_slice(logits, batch * classes, "logits")?.to_vec();
        let targets: Vec<usize> = in_slice(targets, batch, "targets")?.iter().map(|&t| t as usize).collect();
        let logits = Tensor::new(vec![batch, classes], data)?;
        *out = energy_loss(&class_energies(&logits), &targets)?;
        Ok(())
    })
}

/// Fraction of parameters that survive pruning with `mask`.
///
/// # Safety
/// `mask` must hold `ed_network_num_units(net)` bytes.
#[no_mangle]
pub unsafe extern "C" fn ed_network_kept_ratio(
    net: *const EdNetwork,
    mask: *const u8,
    ratio_out: *mut f64,
) -> EdStatus {
    guard(|| {
        let h = net_ref(net)?;
        let out = ratio_out.as_mut().ok_or_else(|| null("ratio_out"))?;
        let units =
            h.units.as_ref().ok_or_else(|| Fail(EdStatus::InvalidArgument, "network has no prunable units".into()))?;
        let state = read_mask(mask, h.net.num_units())?.ok_or_else(|| null("mask"))?;
        *out = units.kept_ratio(&state)?;
        Ok(())
    })
}

/// Integer index of a state, most significant bit first, zero-based.
///
/// # Safety
/// `mask` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ed_state_index(mask: *const u8, len: usize, index_out: *mut u64) -> EdStatus {
    guard(|| {
        let out = index_out.as_mut().ok_or_else(|| null("index_out"))?;
        if len > 64 {
            return Err(Fail(EdStatus::InvalidArgument, format!("state of {len} units does not fit in 64 bits")));
        }
        let state = read_mask(mask, len)?.ok_or_else(|| null("mask"))?;
        *out = state.to_index();
        Ok(())
    })
}
