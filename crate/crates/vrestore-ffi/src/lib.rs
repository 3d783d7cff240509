//! C ABI for the vrestore library.
//!
//! Conventions:
//! - Handles (`VrStage1`, `VrStage2`) are opaque; create with the `_load`
//!   functions, release with the matching `_free`.
//! - Every fallible function returns a `VrStatus` code; `VR_OK` (0) means
//!   success. On failure `vr_last_error` returns a message for the calling
//!   thread.
//! - Frame buffers are `float32`, row-major, RGB interleaved, values in
//!   [0, 1]: index = ((t * height + y) * width + x) * 3 + c.
//!
//! The installed header is `include/vrestore.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_float, c_int, CStr};
use std::path::Path;

use candle_core::Device;
use vrestore::checkpoint::Checkpoint;
use vrestore::data::{load_sequence, save_sequence, Frame, VideoSequence};
use vrestore::ensemble::{cascade_infer, DihedralTransform};
use vrestore::stage1::{load_stage1, Stage1Net};
use vrestore::stage2::{load_stage2, Stage2Net};

pub const VR_OK: c_int = 0;
pub const VR_ERR_NULL_ARGUMENT: c_int = 1;
pub const VR_ERR_INVALID_ARGUMENT: c_int = 2;
pub const VR_ERR_IO: c_int = 3;
pub const VR_ERR_MODEL: c_int = 4;
pub const VR_ERR_INTERNAL: c_int = 5;

pub const VR_TTA_NONE: c_int = 0;
pub const VR_TTA_STAGE1: c_int = 1;
pub const VR_TTA_STAGE2: c_int = 2;
pub const VR_TTA_BOTH: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(code: c_int, msg: impl Into<String>) -> c_int {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    code
}

fn classify(e: &vrestore::error::Error) -> c_int {
    use vrestore::error::Error;
    match e {
        Error::Io { .. } => VR_ERR_IO,
        Error::Checkpoint(_) | Error::Transfer(_) => VR_ERR_MODEL,
        Error::Argument(_) | Error::Config(_) => VR_ERR_INVALID_ARGUMENT,
        _ => VR_ERR_INTERNAL,
    }
}

/// Opaque Stage-I model handle.
pub struct VrStage1(Stage1Net);
/// Opaque Stage-II model handle.
pub struct VrStage2(Stage2Net);

/// Copy the last error message for this thread into `buf` (NUL-terminated,
/// truncated to `len` bytes). Returns the full message length in bytes,
/// excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be NULL (query length only).
#[no_mangle]
pub unsafe extern "C" fn vr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, c_int> {
    if ptr.is_null() {
        return Err(set_error(VR_ERR_NULL_ARGUMENT, "path is NULL"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(set_error(VR_ERR_INVALID_ARGUMENT, "path is not UTF-8")),
    }
}

/// Load a Stage-I checkpoint. On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vr_stage1_load(path: *const c_char, out: *mut *mut VrStage1) -> c_int {
    if out.is_null() {
        return set_error(VR_ERR_NULL_ARGUMENT, "out is NULL");
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(c) => return c,
    };
    let net = Checkpoint::load(path).and_then(|c| load_stage1(&c, &Device::Cpu));
    match net {
        Ok(n) => {
            *out = Box::into_raw(Box::new(VrStage1(n)));
            VR_OK
        }
        Err(e) => set_error(classify(&e), e.to_string()),
    }
}

/// # Safety
/// `handle` must come from `vr_stage1_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vr_stage1_free(handle: *mut VrStage1) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Load a Stage-II checkpoint. On success writes a handle to `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vr_stage2_load(path: *const c_char, out: *mut *mut VrStage2) -> c_int {
    if out.is_null() {
        return set_error(VR_ERR_NULL_ARGUMENT, "out is NULL");
    }
    let path = match path_from(path) {
        Ok(p) => p,
        Err(c) => return c,
    };
    let net = Checkpoint::load(path).and_then(|c| load_stage2(&c, &Device::Cpu));
    match net {
        Ok(n) => {
            *out = Box::into_raw(Box::new(VrStage2(n)));
            VR_OK
        }
        Err(e) => set_error(classify(&e), e.to_string()),
    }
}

/// # Safety
/// `handle` must come from `vr_stage2_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vr_stage2_free(handle: *mut VrStage2) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

unsafe fn sequence_from_raw(
    frames: *const c_float,
    n_frames: usize,
    height: usize,
    width: usize,
    pqf_labels: *const u8,
) -> Result<VideoSequence, c_int> {
    if frames.is_null() {
        return Err(set_error(VR_ERR_NULL_ARGUMENT, "frames is NULL"));
    }
    if n_frames == 0 || height == 0 || width == 0 {
        return Err(set_error(
            VR_ERR_INVALID_ARGUMENT,
            "n_frames, height and width must be positive",
        ));
    }
    let stride = height * width * 3;
    let all = std::slice::from_raw_parts(frames, n_frames * stride);
    let mut fs = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let frame = Frame::new(height, width, all[t * stride..(t + 1) * stride].to_vec())
            .map_err(|e| set_error(VR_ERR_INVALID_ARGUMENT, e.to_string()))?;
        fs.push(frame);
    }
    let mut seq = VideoSequence::new("ffi", fs)
        .map_err(|e| set_error(VR_ERR_INVALID_ARGUMENT, e.to_string()))?;
    if !pqf_labels.is_null() {
        let labels = std::slice::from_raw_parts(pqf_labels, n_frames);
        seq = seq
            .with_labels(labels.iter().map(|&b| b != 0).collect())
            .map_err(|e| set_error(VR_ERR_INVALID_ARGUMENT, e.to_string()))?;
    }
    Ok(seq)
}

/// Restore a clip in memory with the Stage-I model and (optionally) the
/// Stage-II refiner.
///
/// `frames`: `n_frames * height * width * 3` floats (layout above).
/// `pqf_labels`: optional `n_frames` bytes, nonzero = high-quality frame;
/// pass NULL when unknown. `tta` is one of the `VR_TTA_*` constants.
/// `out` receives the restored clip, same shape as `frames`; output pixel
/// values are clamped to [0, 1]. `out` may alias `frames`.
///
/// # Safety
/// `stage1` must be a live handle. `frames` and `out` must point to
/// `n_frames * height * width * 3` floats; `pqf_labels` to `n_frames`
/// bytes when non-NULL.
#[no_mangle]
pub unsafe extern "C" fn vr_restore_clip(
    stage1: *const VrStage1,
    stage2: *const VrStage2,
    frames: *const c_float,
    n_frames: usize,
    height: usize,
    width: usize,
    pqf_labels: *const u8,
    tta: c_int,
    out: *mut c_float,
) -> c_int {
    if stage1.is_null() {
        return set_error(VR_ERR_NULL_ARGUMENT, "stage1 is NULL");
    }
    if out.is_null() {
        return set_error(VR_ERR_NULL_ARGUMENT, "out is NULL");
    }
    let seq = match sequence_from_raw(frames, n_frames, height, width, pqf_labels) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let identity = [DihedralTransform::IDENTITY];
    let all = DihedralTransform::all();
    let (s1_transforms, s2_tta): (&[DihedralTransform], bool) = match tta {
        VR_TTA_NONE => (&identity, false),
        VR_TTA_STAGE1 => (&all, false),
        VR_TTA_STAGE2 => (&identity, true),
        VR_TTA_BOTH => (&all, true),
        _ => return set_error(VR_ERR_INVALID_ARGUMENT, format!("unknown tta mode {tta}")),
    };
    let s1 = &(*stage1).0;
    let s2 = if stage2.is_null() {
        None
    } else {
        Some(&(*stage2).0)
    };
    let enhanced = match cascade_infer(&seq, &[s1], s1_transforms, s2, s2_tta) {
        Ok(s) => s,
        Err(e) => return set_error(classify(&e), e.to_string()),
    };
    let scale = enhanced.height() / height;
    if scale != 1 {
        return set_error(
            VR_ERR_INVALID_ARGUMENT,
            "vr_restore_clip only supports scale-1 models",
        );
    }
    let stride = height * width * 3;
    for (t, frame) in enhanced.frames.iter().enumerate() {
        std::ptr::copy_nonoverlapping(frame.pixels.as_ptr(), out.add(t * stride), stride);
    }
    VR_OK
}

/// Restore every PNG sequence frame in `in_dir` (files `frame_00001.png`,
/// `frame_00002.png`, ...) and write the restored frames to `out_dir`.
///
/// # Safety
/// Pointer arguments follow the same rules as above.
#[no_mangle]
pub unsafe extern "C" fn vr_restore_dir(
    stage1: *const VrStage1,
    stage2: *const VrStage2,
    in_dir: *const c_char,
    out_dir: *const c_char,
    tta: c_int,
) -> c_int {
    if stage1.is_null() {
        return set_error(VR_ERR_NULL_ARGUMENT, "stage1 is NULL");
    }
    let in_dir = match path_from(in_dir) {
        Ok(p) => p,
        Err(c) => return c,
    };
    let out_dir = match path_from(out_dir) {
        Ok(p) => p,
        Err(c) => return c,
    };
    let seq = match load_sequence(in_dir, "frame_") {
        Ok(s) => s,
        Err(e) => return set_error(classify(&e), e.to_string()),
    };
    let identity = [DihedralTransform::IDENTITY];
    let all = DihedralTransform::all();
    let (s1_transforms, s2_tta): (&[DihedralTransform], bool) = match tta {
        VR_TTA_NONE => (&identity, false),
        VR_TTA_STAGE1 => (&all, false),
        VR_TTA_STAGE2 => (&identity, true),
        VR_TTA_BOTH => (&all, true),
        _ => return set_error(VR_ERR_INVALID_ARGUMENT, format!("unknown tta mode {tta}")),
    };
    let s1 = &(*stage1).0;
    let s2 = if stage2.is_null() {
        None
    } else {
        Some(&(*stage2).0)
    };
    let enhanced = match cascade_infer(&seq, &[s1], s1_transforms, s2, s2_tta) {
        Ok(s) => s,
        Err(e) => return set_error(classify(&e), e.to_string()),
    };
    match save_sequence(&enhanced, out_dir) {
        Ok(()) => VR_OK,
        Err(e) => set_error(classify(&e), e.to_string()),
    }
}

/// PSNR between two frames of equal size (peak 1.0, capped at 100 dB).
/// Writes the result to `out`.
///
/// # Safety
/// `a` and `b` must point to `height * width * 3` floats; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vr_psnr(
    a: *const c_float,
    b: *const c_float,
    height: usize,
    width: usize,
    out: *mut c_double,
) -> c_int {
    if a.is_null() || b.is_null() || out.is_null() {
        return set_error(VR_ERR_NULL_ARGUMENT, "a, b and out must be non-NULL");
    }
    if height == 0 || width == 0 {
        return set_error(VR_ERR_INVALID_ARGUMENT, "height and width must be positive");
    }
    let n = height * width * 3;
    let fa = match Frame::new(height, width, std::slice::from_raw_parts(a, n).to_vec()) {
        Ok(f) => f,
        Err(e) => return set_error(VR_ERR_INVALID_ARGUMENT, e.to_string()),
    };
    let fb = match Frame::new(height, width, std::slice::from_raw_parts(b, n).to_vec()) {
        Ok(f) => f,
        Err(e) => return set_error(VR_ERR_INVALID_ARGUMENT, e.to_string()),
    };
    match vrestore::eval::psnr(&fa, &fb, 1.0, 100.0) {
        Ok(v) => {
            *out = v;
            VR_OK
        }
        Err(e) => set_error(classify(&e), e.to_string()),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
