//! C ABI over `ceir-core`.
//!
//! Objects cross the boundary as opaque handles created by `ceir_*_new`,
//! `ceir_*_read` or `ceir_*_load` and released with the matching
//! `ceir_*_free`. Every fallible call returns a [`CeirStatus`]; on failure the
//! message is available from [`ceir_last_error_message`] on the same thread.
//! Output handles are only written on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ceir_core::attribution::integrated_gradients;
use ceir_core::cbl::{cubed_alignment_loss, project_concepts, BottleneckModel};
use ceir_core::embedding_store::{compute_similarity, read_matrix, write_matrix};
use ceir_core::evaluation::{ari, clustering_accuracy, kmeans, nmi, KMeansConfig};
use ceir_core::vae::{latent_representation, VaeModel};
use ceir_core::{Error, Matrix};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeirStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    Io = 5,
    Lineage = 6,
    Numerical = 7,
    Panic = 8,
}

impl From<&Error> for CeirStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => CeirStatus::Dimension,
            Error::Format { .. } => CeirStatus::Format,
            Error::Io { .. } => CeirStatus::Io,
            Error::Lineage(_) => CeirStatus::Lineage,
            Error::Numerical(_) | Error::NonFinite { .. } => CeirStatus::Numerical,
            _ => CeirStatus::InvalidArgument,
        }
    }
}

/// Row-major f32 matrix.
pub struct CeirMatrix(Matrix);

/// Trained concept bottleneck (M × d0 projection).
pub struct CeirBottleneck(BottleneckModel);

/// Trained VAE.
pub struct CeirVae(VaeModel);

/// Clustering metrics in [0, 1] (ARI may be negative).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CeirMetrics {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CeirStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CeirStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CeirStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(CeirStatus::InvalidArgument, message.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CeirStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CeirStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {message}"));
            CeirStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ceir_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ceir_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `rows × cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_matrix_new(rows: usize, cols: usize, data: *const f32, out: *mut *mut CeirMatrix) -> CeirStatus {
    guard(|| {
        let len = rows.checked_mul(cols).ok_or_else(|| invalid("matrix size overflows"))?;
        let values = slice(data, len, "data")?.to_vec();
        put(out, CeirMatrix(Matrix::new(rows, cols, values)?))
    })
}

/// Reads a `.cemb` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_matrix_read(path: *const c_char, out: *mut *mut CeirMatrix) -> CeirStatus {
    guard(|| put(out, CeirMatrix(read_matrix(path_arg(path)?)?)))
}

/// Writes a `.cemb` file atomically.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ceir_matrix_write(m: *const CeirMatrix, path: *const c_char) -> CeirStatus {
    guard(|| Ok(write_matrix(&deref(m, "matrix")?.0, path_arg(path)?)?))
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ceir_matrix_rows(m: *const CeirMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ceir_matrix_cols(m: *const CeirMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Borrowed pointer to the row-major values, valid while `m` lives.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ceir_matrix_data(m: *const CeirMatrix) -> *const f32 {
    m.as_ref().map_or(ptr::null(), |m| m.0.as_slice().as_ptr())
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ceir_matrix_free(m: *mut CeirMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Concept similarity P (N × M) from image (N × d) and text (M × d) embeddings.
///
/// # Safety
/// `image` and `text` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_similarity(
    image: *const CeirMatrix,
    text: *const CeirMatrix,
    l2_normalize: bool,
    out: *mut *mut CeirMatrix,
) -> CeirStatus {
    guard(|| {
        let p = compute_similarity(&deref(image, "image")?.0, &deref(text, "text")?.0, l2_normalize)?;
        put(out, CeirMatrix(p))
    })
}

/// Cubed alignment loss between concept activations and similarity.
///
/// # Safety
/// `q` and `p` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_alignment_loss(q: *const CeirMatrix, p: *const CeirMatrix, out: *mut f64) -> CeirStatus {
    guard(|| {
        let loss = cubed_alignment_loss(&deref(q, "q")?.0, &deref(p, "p")?.0)?;
        *out.as_mut().ok_or_else(|| null("out"))? = loss;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_bottleneck_load(path: *const c_char, out: *mut *mut CeirBottleneck) -> CeirStatus {
    guard(|| put(out, CeirBottleneck(BottleneckModel::load(path_arg(path)?)?)))
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ceir_bottleneck_concepts(model: *const CeirBottleneck) -> usize {
    model.as_ref().map_or(0, |m| m.0.concept_count())
}

/// Concept activations Q = X·Wᵀ (N × M) for backbone features X (N × d0).
///
/// # Safety
/// `model` and `features` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_bottleneck_project(
    model: *const CeirBottleneck,
    features: *const CeirMatrix,
    out: *mut *mut CeirMatrix,
) -> CeirStatus {
    guard(|| {
        let q = project_concepts(&deref(model, "model")?.0, &deref(features, "features")?.0)?;
        put(out, CeirMatrix(q))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ceir_bottleneck_free(model: *mut CeirBottleneck) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_vae_load(path: *const c_char, out: *mut *mut CeirVae) -> CeirStatus {
    guard(|| put(out, CeirVae(VaeModel::load(path_arg(path)?)?)))
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ceir_vae_input_dim(model: *const CeirVae) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ceir_vae_latent_dim(model: *const CeirVae) -> usize {
    model.as_ref().map_or(0, |m| m.0.latent_dim())
}

/// Posterior means (N × K) for concept vectors (N × M).
///
/// # Safety
/// `model` and `q` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_vae_latent(model: *const CeirVae, q: *const CeirMatrix, out: *mut *mut CeirMatrix) -> CeirStatus {
    guard(|| {
        let h = latent_representation(&deref(model, "model")?.0, &deref(q, "q")?.0)?;
        put(out, CeirMatrix(h))
    })
}

/// Integrated-gradients importance of each of the `len` concept dimensions
/// of one concept vector, written to `importance` (length `len`).
///
/// # Safety
/// `q` and `importance` must point to `len` doubles; `gap` may be null.
#[no_mangle]
pub unsafe extern "C" fn ceir_vae_attribute(
    model: *const CeirVae,
    q: *const f64,
    len: usize,
    steps: usize,
    importance: *mut f64,
    gap: *mut f64,
) -> CeirStatus {
    guard(|| {
        let frozen = deref(model, "model")?.0.frozen();
        let q = slice(q, len, "q")?;
        let out = slice_mut(importance, len, "importance")?;
        let result = integrated_gradients(&frozen, q, steps)?;
        out.copy_from_slice(&result.importance);
        if let Some(g) = gap.as_mut() {
            *g = result.completeness_gap;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ceir_vae_free(model: *mut CeirVae) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// K-means with k-means++ seeding; writes one cluster index per row of `h`
/// to `assignments` and the final inertia to `inertia` (may be null).
///
/// # Safety
/// `h` must be a live handle and `assignments` must hold `rows(h)` entries.
#[no_mangle]
pub unsafe extern "C" fn ceir_kmeans(
    h: *const CeirMatrix,
    k: usize,
    restarts: usize,
    seed: u64,
    assignments: *mut usize,
    inertia: *mut f64,
) -> CeirStatus {
    guard(|| {
        let h = &deref(h, "h")?.0;
        let out = slice_mut(assignments, h.rows(), "assignments")?;
        let cfg = KMeansConfig {
            restarts,
            seed,
            ..KMeansConfig::default()
        };
        let result = kmeans(h, k, &cfg)?;
        out.copy_from_slice(&result.assignments);
        if let Some(i) = inertia.as_mut() {
            *i = result.inertia;
        }
        Ok(())
    })
}

/// NMI, Hungarian-matched accuracy and ARI of `pred` against `truth`.
///
/// # Safety
/// `pred` and `truth` must point to `n` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ceir_cluster_metrics(pred: *const usize, truth: *const usize, n: usize, out: *mut CeirMetrics) -> CeirStatus {
    guard(|| {
        let pred = slice(pred, n, "pred")?;
        let truth = slice(truth, n, "truth")?;
        let metrics = CeirMetrics {
            nmi: nmi(pred, truth)?,
            acc: clustering_accuracy(pred, truth)?,
            ari: ari(pred, truth)?,
        };
        *out.as_mut().ok_or_else(|| null("out"))? = metrics;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message() -> String {
        unsafe { CStr::from_ptr(ceir_last_error_message()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn status_mapping() {
        assert_eq!(CeirStatus::from(&Error::Lineage("x".into())), CeirStatus::Lineage);
        assert_eq!(CeirStatus::from(&Error::NonFinite { index: 0 }), CeirStatus::Numerical);
        assert_eq!(CeirStatus::from(&Error::EmptyModel), CeirStatus::InvalidArgument);
    }

    #[test]
    fn errors_set_and_clear_the_message() {
        let mut out = ptr::null_mut();
        let status = unsafe { ceir_matrix_new(2, 2, ptr::null(), &mut out) };
        assert_eq!(status, CeirStatus::NullPointer);
        assert!(out.is_null());
        assert_eq!(message(), "data is null");
        let data = [1.0f32; 4];
        assert_eq!(unsafe { ceir_matrix_new(2, 2, data.as_ptr(), &mut out) }, CeirStatus::Ok);
        assert_eq!(message(), "");
        unsafe { ceir_matrix_free(out) };
    }

    #[test]
    fn panics_become_status_codes() {
        assert_eq!(guard(|| panic!("boom")), CeirStatus::Panic);
        assert_eq!(message(), "internal panic: boom");
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(ceir_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
