//! C ABI over the retrieval metrics, dual softmax, contrastive loss,
//! key-frame selection and the M2RP matrix container.
//!
//! Every function returns a [`VtrStatus`]; results come back through out
//! pointers. On failure the calling thread's last error message is set and
//! can be read with [`vtr_last_error`]. Matrices cross the boundary as opaque
//! [`VtrMatrix`] handles that the caller frees with [`vtr_matrix_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vtrecipe::evaluation::{apply_dsl, avg_r, recall_at_k, Direction};
use vtrecipe::keyframes::tsdpc_extract_with;
use vtrecipe::numerics::container::{read_matrix, write_matrix};
use vtrecipe::numerics::Matrix;
use vtrecipe::objectives::{vtc_from_scores, LossOptions};
use vtrecipe::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VtrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numeric = 4,
    Io = 5,
    Format = 6,
    /// Caller buffer too small; the required length was still written.
    BufferTooSmall = 7,
    Panic = 8,
}

/// Query direction: text-to-video queries are columns of the score grid.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VtrDirection {
    TextToVideo = 0,
    VideoToText = 1,
}

impl From<VtrDirection> for Direction {
    fn from(d: VtrDirection) -> Self {
        match d {
            VtrDirection::TextToVideo => Direction::TextToVideo,
            VtrDirection::VideoToText => Direction::VideoToText,
        }
    }
}

/// Row-major `f64` matrix owned by the library.
pub struct VtrMatrix(Matrix);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VtrStatus {
    match e {
        Error::Shape { .. } => VtrStatus::ShapeMismatch,
        Error::Numeric(_) => VtrStatus::Numeric,
        Error::Io(_) => VtrStatus::Io,
        Error::Format(_) => VtrStatus::Format,
        _ => VtrStatus::InvalidArgument,
    }
}

struct Fail(VtrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(VtrStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus the thread's
/// last error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VtrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VtrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            VtrStatus::Panic
        }
    }
}

unsafe fn matrix<'a>(m: *const VtrMatrix, what: &str) -> Result<&'a Matrix, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(VtrStatus::InvalidArgument, format!("path is not UTF-8: {e}")))
}

fn boxed(m: Matrix) -> *mut VtrMatrix {
    Box::into_raw(Box::new(VtrMatrix(m)))
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vtr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vtr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `rows * cols` values from `data` (row-major) into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be valid
/// for a write.
#[no_mangle]
pub unsafe extern "C" fn vtr_matrix_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut VtrMatrix) -> VtrStatus {
    guard(|| {
        let out = unsafe { self::out(out, "out") }?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(VtrStatus::InvalidArgument, format!("{rows} x {cols} overflows")))?;
        let values = if n == 0 {
            Vec::new()
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            unsafe { std::slice::from_raw_parts(data, n) }.to_vec()
        };
        *out = boxed(Matrix::new(rows, cols, values)?);
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vtr_matrix_free(m: *mut VtrMatrix) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// # Safety
/// `m` must be a live handle; `rows` and `cols` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vtr_matrix_shape(m: *const VtrMatrix, rows: *mut usize, cols: *mut usize) -> VtrStatus {
    guard(|| {
        let m = unsafe { matrix(m, "matrix") }?;
        *unsafe { out(rows, "rows") }? = m.rows();
        *unsafe { out(cols, "cols") }? = m.cols();
        Ok(())
    })
}

/// Copies the values row-major into `buf` of `len` doubles.
///
/// # Safety
/// `m` must be a live handle; `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vtr_matrix_copy(m: *const VtrMatrix, buf: *mut f64, len: usize) -> VtrStatus {
    guard(|| {
        let m = unsafe { matrix(m, "matrix") }?;
        let data = m.data();
        if len < data.len() {
            return Err(Fail(
                VtrStatus::BufferTooSmall,
                format!("buffer holds {len} values, matrix has {}", data.len()),
            ));
        }
        if !data.is_empty() {
            if buf.is_null() {
                return Err(null("buf"));
            }
            unsafe { std::slice::from_raw_parts_mut(buf, data.len()) }.copy_from_slice(data);
        }
        Ok(())
    })
}

/// Reads a single-matrix M2RP file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vtr_matrix_read(path: *const c_char, out: *mut *mut VtrMatrix) -> VtrStatus {
    guard(|| {
        let p = unsafe { self::path(path) }?;
        let out = unsafe { self::out(out, "out") }?;
        *out = boxed(read_matrix(p)?);
        Ok(())
    })
}

/// Writes `m` as a single-matrix M2RP file (values stored as 32-bit floats).
///
/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vtr_matrix_write(m: *const VtrMatrix, path: *const c_char) -> VtrStatus {
    guard(|| {
        let m = unsafe { matrix(m, "matrix") }?;
        write_matrix(unsafe { self::path(path) }?, m)?;
        Ok(())
    })
}

/// Recall@k in percent of a square score grid whose diagonal holds the
/// true pairs (rows are videos, columns texts).
///
/// # Safety
/// `scores` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vtr_recall_at_k(scores: *const VtrMatrix, k: usize, direction: VtrDirection, out: *mut f64) -> VtrStatus {
    guard(|| {
        let s = unsafe { matrix(scores, "scores") }?;
        *unsafe { self::out(out, "out") }? = recall_at_k(s, k, direction.into())?;
        Ok(())
    })
}

/// Mean of R@1, R@5 and R@10, each in [0, 100].
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vtr_avg_r(r1: f64, r5: f64, r10: f64, out: *mut f64) -> VtrStatus {
    guard(|| {
        *unsafe { self::out(out, "out") }? = avg_r(r1, r5, r10)?;
        Ok(())
    })
}

/// Dual-softmax re-weighting with temperature `beta`; returns a new matrix.
///
/// # Safety
/// `scores` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vtr_dsl(scores: *const VtrMatrix, beta: f64, direction: VtrDirection, out: *mut *mut VtrMatrix) -> VtrStatus {
    guard(|| {
        let s = unsafe { matrix(scores, "scores") }?;
        let out = unsafe { self::out(out, "out") }?;
        *out = boxed(apply_dsl(s, beta, direction.into())?);
        Ok(())
    })
}

/// Text-anchored contrastive loss of a `B x B` score grid (rows videos,
/// columns texts, positives on the diagonal) at logit `scale`.
///
/// # Safety
/// `scores` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vtr_vtc_loss(
    scores: *const VtrMatrix,
    scale: f64,
    symmetric: bool,
    batch_mean: bool,
    out: *mut f64,
) -> VtrStatus {
    guard(|| {
        let s = unsafe { matrix(scores, "scores") }?;
        *unsafe { self::out(out, "out") }? = vtc_from_scores(s, scale, LossOptions { symmetric, batch_mean })?;
        Ok(())
    })
}

/// Key-frame positions of `frames` (one row per frame). Writes up to
/// `capacity` strictly increasing indices into `indices` and the full count
/// into `len`; a short buffer yields `BufferTooSmall` with `len` set.
///
/// # Safety
/// `frames` must be a live handle; `indices` must hold `capacity` writable
/// values; `len` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vtr_tsdpc(
    frames: *const VtrMatrix,
    n_key: usize,
    cutoff_percentile: f64,
    indices: *mut usize,
    capacity: usize,
    len: *mut usize,
) -> VtrStatus {
    guard(|| {
        let f = unsafe { matrix(frames, "frames") }?;
        let len = unsafe { out(len, "len") }?;
        let sel = tsdpc_extract_with(f, n_key, cutoff_percentile)?.indices;
        *len = sel.len();
        if capacity < sel.len() {
            return Err(Fail(
                VtrStatus::BufferTooSmall,
                format!("buffer holds {capacity} indices, selection has {}", sel.len()),
            ));
        }
        if indices.is_null() {
            return Err(null("indices"));
        }
        unsafe { std::slice::from_raw_parts_mut(indices, sel.len()) }.copy_from_slice(&sel);
        Ok(())
    })
}
