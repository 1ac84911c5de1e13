//! C ABI over volmoe inference.
//!
//! A model is loaded from a checkpoint into an opaque `VolmoeModel` handle.
//! Every fallible call returns a `VolmoeStatus`; on failure the message is
//! available from `volmoe_last_error_message` on the same thread. Volumes are
//! cubic `float` grids of side `volmoe_model_volume_side`, voxel `(x, y, z)` at
//! index `(x * side + y) * side + z`. Output probabilities use the same layout.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use volmoe::encoders::{PromptPoint, PromptSpec};
use volmoe::model::{MoeModel, RoutingReport};
use volmoe::selector::{Fusion, SelectorConfig};
use volmoe::volume::Volume;
use volmoe::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Load = 4,
    BufferTooSmall = 5,
    Contract = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolmoeFusion {
    Weighted = 0,
    Average = 1,
    AftWeight = 2,
}

/// Selector settings: switch threshold in `[0, 1]` and fusion rule.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolmoeSelector {
    pub tau: f64,
    pub fusion: VolmoeFusion,
}

/// Routing decision for one inference call. `top_index` is -1 when the model
/// has no experts.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolmoeRouting {
    pub top_index: i64,
    pub s_top: f64,
    pub fired: bool,
}

/// Point label values accepted by `volmoe_infer_points`.
pub const VOLMOE_POINT_BACKGROUND: i32 = 0;
pub const VOLMOE_POINT_FOREGROUND: i32 = 1;

/// Opaque model handle.
pub struct VolmoeModel {
    model: MoeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(VolmoeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => VolmoeStatus::Io,
            Error::Load(_) | Error::Checksum(_) | Error::Json(_) => VolmoeStatus::Load,
            Error::Contract(_) | Error::Registry(_) => VolmoeStatus::Contract,
            _ => VolmoeStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: VolmoeStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VolmoeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VolmoeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VolmoeStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const VolmoeModel) -> Result<&'a MoeModel, Failure> {
    // SAFETY: the caller passes a handle from `volmoe_model_load` or null.
    unsafe { model.as_ref() }
        .map(|m| &m.model)
        .ok_or_else(|| fail(VolmoeStatus::NullPointer, "model handle is null"))
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(VolmoeStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller guarantees `len` readable elements at `data`.
    Ok(unsafe { std::slice::from_raw_parts(data, len) })
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(VolmoeStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and, per the contract, valid for writes.
    unsafe { out.write(value) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next volmoe call on the same thread.
#[no_mangle]
pub extern "C" fn volmoe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint. On success `*out` owns a handle to release with
/// `volmoe_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn volmoe_model_load(path: *const c_char, out: *mut *mut VolmoeModel) -> VolmoeStatus {
    guard(|| {
        if path.is_null() {
            return Err(fail(VolmoeStatus::NullPointer, "path is null"));
        }
        if out.is_null() {
            return Err(fail(VolmoeStatus::NullPointer, "out is null"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(VolmoeStatus::InvalidArgument, "path is not UTF-8"))?;
        let model = MoeModel::load(Path::new(path))?;
        write_out(out, Box::into_raw(Box::new(VolmoeModel { model })), "out")
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `volmoe_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn volmoe_model_free(model: *mut VolmoeModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Edge length of the cubic input volume the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn volmoe_model_volume_side(model: *const VolmoeModel, out: *mut usize) -> VolmoeStatus {
    guard(|| {
        let m = unsafe { model_ref(model)? };
        write_out(out, m.config.volume_side, "out")
    })
}

/// Number of expert decoders (excluding the general decoder).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn volmoe_model_expert_count(model: *const VolmoeModel, out: *mut usize) -> VolmoeStatus {
    guard(|| {
        let m = unsafe { model_ref(model)? };
        write_out(out, m.bank.len(), "out")
    })
}

/// Copies the label of expert `index` into `buf` as a NUL-terminated string.
/// `*needed` receives the required size including the terminator, also when
/// the buffer is too small.
///
/// # Safety
/// `model` must be a live handle, `buf` writable for `buf_len` bytes (or null
/// with `buf_len == 0`), and `needed` writable or null.
#[no_mangle]
pub unsafe extern "C" fn volmoe_model_expert_label(
    model: *const VolmoeModel,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> VolmoeStatus {
    guard(|| {
        let m = unsafe { model_ref(model)? };
        let labels = m.bank.labels();
        let label = labels.get(index).ok_or_else(|| {
            fail(
                VolmoeStatus::InvalidArgument,
                format!("expert index {index} out of range (have {})", labels.len()),
            )
        })?;
        let size = label.len() + 1;
        if !needed.is_null() {
            write_out(needed, size, "needed")?;
        }
        if buf_len < size {
            return Err(fail(
                VolmoeStatus::BufferTooSmall,
                format!("label needs {size} bytes, buffer has {buf_len}"),
            ));
        }
        if buf.is_null() {
            return Err(fail(VolmoeStatus::NullPointer, "buf is null"));
        }
        // SAFETY: `buf` holds at least `size` bytes.
        unsafe {
            ptr::copy_nonoverlapping(label.as_ptr().cast::<c_char>(), buf, label.len());
            buf.add(label.len()).write(0);
        }
        Ok(())
    })
}

fn selector_from(sel: *const VolmoeSelector) -> Result<SelectorConfig, Failure> {
    // SAFETY: null or a valid selector per the contract.
    let Some(sel) = (unsafe { sel.as_ref() }) else {
        return Ok(SelectorConfig::default());
    };
    let fusion = match sel.fusion {
        VolmoeFusion::Weighted => Fusion::Weighted,
        VolmoeFusion::Average => Fusion::Avg,
        VolmoeFusion::AftWeight => Fusion::AftWeight,
    };
    Ok(SelectorConfig::new(sel.tau, fusion)?)
}

fn routing_of(r: &RoutingReport) -> VolmoeRouting {
    VolmoeRouting {
        top_index: r.top_index.map_or(-1, |i| i as i64),
        s_top: r.s_top,
        fired: r.fired,
    }
}

unsafe fn run_inference(
    model: *const VolmoeModel,
    volume: *const f32,
    volume_len: usize,
    prompt: PromptSpec,
    selector: *const VolmoeSelector,
    probs_out: *mut f64,
    probs_len: usize,
    routing_out: *mut VolmoeRouting,
) -> Result<(), Failure> {
    let m = unsafe { model_ref(model)? };
    let side = m.config.volume_side;
    let dims = [side; 3];
    let n = side * side * side;
    if volume_len != n {
        return Err(fail(
            VolmoeStatus::InvalidArgument,
            format!("volume has {volume_len} voxels, model expects {n}"),
        ));
    }
    if probs_len < n {
        return Err(fail(
            VolmoeStatus::BufferTooSmall,
            format!("probability buffer has {probs_len} slots, needs {n}"),
        ));
    }
    if probs_out.is_null() {
        return Err(fail(VolmoeStatus::NullPointer, "probs_out is null"));
    }
    let data = unsafe { slice(volume, volume_len, "volume")? };
    let vol = Volume::new(dims, data.to_vec())?;
    prompt.validate(dims)?;
    let out = m.infer(&vol, &prompt, &selector_from(selector)?)?;
    // SAFETY: checked non-null with room for `n` values.
    unsafe { std::slice::from_raw_parts_mut(probs_out, n) }.copy_from_slice(&out.probs);
    if !routing_out.is_null() {
        write_out(routing_out, routing_of(&out.report), "routing_out")?;
    }
    Ok(())
}

/// Segments `volume` from `n_points` point prompts. `coords` holds `3 *
/// n_points` voxel coordinates `(x, y, z)`; `labels` holds one
/// `VOLMOE_POINT_*` value per point. Foreground probabilities are written to
/// `probs_out`; `routing_out` may be null. A null `selector` means tau 0.5
/// with weighted fusion.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn volmoe_infer_points(
    model: *const VolmoeModel,
    volume: *const f32,
    volume_len: usize,
    coords: *const u32,
    labels: *const i32,
    n_points: usize,
    selector: *const VolmoeSelector,
    probs_out: *mut f64,
    probs_len: usize,
    routing_out: *mut VolmoeRouting,
) -> VolmoeStatus {
    guard(|| {
        if n_points == 0 {
            return Err(fail(VolmoeStatus::InvalidArgument, "no prompt points"));
        }
        let coords = unsafe { slice(coords, 3 * n_points, "coords")? };
        let labels = unsafe { slice(labels, n_points, "labels")? };
        let mut points = Vec::with_capacity(n_points);
        for (c, &l) in coords.chunks_exact(3).zip(labels) {
            let coord = [c[0] as usize, c[1] as usize, c[2] as usize];
            points.push(match l {
                VOLMOE_POINT_FOREGROUND => PromptPoint::foreground(coord),
                VOLMOE_POINT_BACKGROUND => PromptPoint::background(coord),
                other => return Err(fail(VolmoeStatus::InvalidArgument, format!("unknown point label {other}"))),
            });
        }
        unsafe {
            run_inference(
                model,
                volume,
                volume_len,
                PromptSpec::Points { points },
                selector,
                probs_out,
                probs_len,
                routing_out,
            )
        }
    })
}

/// Segments `volume` from an inclusive box prompt `box_min..=box_max`, each a
/// 3-element voxel coordinate. Other arguments as in `volmoe_infer_points`.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn volmoe_infer_box(
    model: *const VolmoeModel,
    volume: *const f32,
    volume_len: usize,
    box_min: *const u32,
    box_max: *const u32,
    selector: *const VolmoeSelector,
    probs_out: *mut f64,
    probs_len: usize,
    routing_out: *mut VolmoeRouting,
) -> VolmoeStatus {
    guard(|| {
        let lo = unsafe { slice(box_min, 3, "box_min")? };
        let hi = unsafe { slice(box_max, 3, "box_max")? };
        let coord = |c: &[u32]| [c[0] as usize, c[1] as usize, c[2] as usize];
        let prompt = PromptSpec::Box {
            min: coord(lo),
            max: coord(hi),
        };
        unsafe {
            run_inference(
                model,
                volume,
                volume_len,
                prompt,
                selector,
                probs_out,
                probs_len,
                routing_out,
            )
        }
    })
}
