//! C ABI over `attnmask`.
//!
//! Stacks and segmentations cross the boundary as opaque handles owned by the
//! caller and released with their `_free` function. Every fallible call
//! returns an [`AmStatus`]; on failure the message is available from
//! [`am_last_error_message`] on the same thread until the next failing call.
//! Panics are caught at the boundary and reported as `AM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use attnmask::archive::{read_archive, read_archive_file, ArchiveError};
use attnmask::masking::BinaryMask;
use attnmask::merging::{kl_distance, MergeParams};
use attnmask::metrics::{compute_metrics, confusion_counts, ConfusionCounts, MetricReport};
use attnmask::pipeline::{segment_stack, RunConfig, Segmentation};
use attnmask::stack::AttentionStack;
use attnmask::WeightMode;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Archive = 4,
    Segmentation = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A parsed capture archive.
pub struct AmStack(AttentionStack);

/// Label and confidence maps from one segmentation.
pub struct AmSegmentation(Segmentation);

/// Weighting of layers during aggregation.
pub const AM_WEIGHTS_PROPORTIONAL: u32 = 0;
pub const AM_WEIGHTS_UNIFORM: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AmSegmentParams {
    pub target: u32,
    pub grid: u32,
    pub tau: f64,
    pub iterations: u32,
    pub epsilon: f64,
    /// `AM_WEIGHTS_PROPORTIONAL` or `AM_WEIGHTS_UNIFORM`.
    pub weights: u32,
    pub output_width: u32,
    pub output_height: u32,
}

/// Percentages in `[0, 100]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AmMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub dsc: f64,
    /// Both masks empty; the scores are 100 by convention.
    pub degenerate: bool,
}

impl From<MetricReport> for AmMetrics {
    fn from(m: MetricReport) -> Self {
        Self {
            iou: m.iou,
            precision: m.precision,
            recall: m.recall,
            dsc: m.dsc,
            degenerate: m.degenerate,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(AmStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(AmStatus::NullArgument, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(AmStatus::InvalidArgument, msg.into())
    }
}

impl From<ArchiveError> for Failure {
    fn from(e: ArchiveError) -> Self {
        let status = match e {
            ArchiveError::Io(_) => AmStatus::Io,
            _ => AmStatus::Archive,
        };
        Failure(status, format!("{}: {e}", e.class()))
    }
}

/// Runs `f`, converting errors and panics into a status plus a message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AmStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| Failure::null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn am_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failing call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn am_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Reads an ATNP archive from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_stack_read_file(path: *const c_char, out: *mut *mut AmStack) -> AmStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::null("path"));
        }
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| Failure::invalid(format!("path is not UTF-8: {e}")))?;
        let stack = read_archive_file(path)?;
        *out = Box::into_raw(Box::new(AmStack(stack)));
        Ok(())
    })
}

/// Reads an ATNP archive from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn am_stack_read_bytes(data: *const u8, len: usize, out: *mut *mut AmStack) -> AmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let bytes = slice(data, len, "data")?;
        let stack = read_archive(bytes)?;
        *out = Box::into_raw(Box::new(AmStack(stack)));
        Ok(())
    })
}

/// Number of self-attention layers, or 0 for a NULL handle.
///
/// # Safety
/// `stack` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_stack_layer_count(stack: *const AmStack) -> usize {
    stack.as_ref().map_or(0, |s| s.0.self_attention.len())
}

/// # Safety
/// `stack` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_stack_has_cross_attention(stack: *const AmStack) -> bool {
    stack.as_ref().is_some_and(|s| s.0.has_cross_attention())
}

/// # Safety
/// `stack` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_stack_free(stack: *mut AmStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// The library defaults at a 64 x 64 target and 512 x 512 output.
#[no_mangle]
pub extern "C" fn am_segment_params_default() -> AmSegmentParams {
    let c = RunConfig::default();
    AmSegmentParams {
        target: c.target as u32,
        grid: c.merge.grid as u32,
        tau: c.merge.tau,
        iterations: c.merge.iterations as u32,
        epsilon: c.merge.epsilon,
        weights: AM_WEIGHTS_PROPORTIONAL,
        output_width: c.output_width as u32,
        output_height: c.output_height as u32,
    }
}

fn run_config(p: &AmSegmentParams) -> Result<RunConfig, Failure> {
    let weights = match p.weights {
        AM_WEIGHTS_PROPORTIONAL => WeightMode::Proportional,
        AM_WEIGHTS_UNIFORM => WeightMode::Uniform,
        other => return Err(Failure::invalid(format!("weights: unknown mode {other}"))),
    };
    let config = RunConfig {
        target: p.target as usize,
        merge: MergeParams {
            grid: p.grid as usize,
            tau: p.tau,
            iterations: p.iterations as usize,
            epsilon: p.epsilon,
            ..MergeParams::default()
        },
        weights,
        output_width: p.output_width as usize,
        output_height: p.output_height as usize,
        ..RunConfig::default()
    };
    config.validate().map_err(|e| Failure::invalid(e.to_string()))?;
    Ok(config)
}

/// Segments `stack` into labels and confidences.
///
/// # Safety
/// `stack` must be a live handle, `params` NULL (defaults) or valid, and
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn am_segment(
    stack: *const AmStack,
    params: *const AmSegmentParams,
    out: *mut *mut AmSegmentation,
) -> AmStatus {
    guard(|| {
        let stack = handle(stack, "stack")?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let params = params.as_ref().copied().unwrap_or_else(|| am_segment_params_default());
        let config = run_config(&params)?;
        let (seg, _) = segment_stack(&stack.0, &config, config.output_width, config.output_height)
            .map_err(|e| Failure(AmStatus::Segmentation, e.to_string()))?;
        *out = Box::into_raw(Box::new(AmSegmentation(seg)));
        Ok(())
    })
}

/// # Safety
/// `seg` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_segmentation_width(seg: *const AmSegmentation) -> usize {
    seg.as_ref().map_or(0, |s| s.0.labels.width)
}

/// # Safety
/// `seg` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_segmentation_height(seg: *const AmSegmentation) -> usize {
    seg.as_ref().map_or(0, |s| s.0.labels.height)
}

/// Number of candidate labels; some may own no pixels.
///
/// # Safety
/// `seg` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_segmentation_label_count(seg: *const AmSegmentation) -> usize {
    seg.as_ref().map_or(0, |s| s.0.labels.label_count)
}

/// Copies the row-major label map into `buf`, which must hold
/// `width * height` entries.
///
/// # Safety
/// `seg` must be a live handle and `buf` writable for `len` entries.
#[no_mangle]
pub unsafe extern "C" fn am_segmentation_copy_labels(seg: *const AmSegmentation, buf: *mut u32, len: usize) -> AmStatus {
    guard(|| copy_out(&handle(seg, "seg")?.0.labels.labels, buf, len))
}

/// Copies the row-major confidence map into `buf`.
///
/// # Safety
/// `seg` must be a live handle and `buf` writable for `len` entries.
#[no_mangle]
pub unsafe extern "C" fn am_segmentation_copy_confidence(
    seg: *const AmSegmentation,
    buf: *mut f64,
    len: usize,
) -> AmStatus {
    guard(|| copy_out(&handle(seg, "seg")?.0.confidence.values, buf, len))
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, len: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(Failure::null("buf"));
    }
    if len < src.len() {
        return Err(Failure(
            AmStatus::BufferTooSmall,
            format!("buffer holds {len} entries, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// # Safety
/// `seg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_segmentation_free(seg: *mut AmSegmentation) {
    if !seg.is_null() {
        drop(Box::from_raw(seg));
    }
}

/// Scores from pixel counts.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn am_metrics_from_counts(
    true_positives: u64,
    false_positives: u64,
    false_negatives: u64,
    true_negatives: u64,
    out: *mut AmMetrics,
) -> AmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| Failure::null("out"))?;
        *out = compute_metrics(ConfusionCounts::new(
            true_positives,
            false_positives,
            false_negatives,
            true_negatives,
        )).into();
        Ok(())
    })
}

/// Scores two masks of `len` bytes each; nonzero bytes are foreground.
///
/// # Safety
/// `pred` and `gt` must each point to `len` readable bytes; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn am_metrics_from_masks(pred: *const u8, gt: *const u8, len: usize, out: *mut AmMetrics) -> AmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| Failure::null("out"))?;
        let mask = |data: &[u8]| BinaryMask::new(data.len(), 1, data.iter().map(|&b| b != 0).collect());
        let pred = mask(slice(pred, len, "pred")?);
        let gt = mask(slice(gt, len, "gt")?);
        let counts = confusion_counts(&pred, &gt).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = compute_metrics(counts).into();
        Ok(())
    })
}

/// Symmetric KL distance between two distributions of `len` cells, with
/// values floored at `epsilon` and renormalized.
///
/// # Safety
/// `p` and `q` must each point to `len` readable doubles; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn am_kl_distance(p: *const f64, q: *const f64, len: usize, epsilon: f64, out: *mut f64) -> AmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| Failure::null("out"))?;
        if len == 0 {
            return Err(Failure::invalid("len must be > 0"));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Failure::invalid("epsilon must be > 0"));
        }
        let (p, q) = (slice(p, len, "p")?, slice(q, len, "q")?);
        *out = kl_distance(p, q, epsilon).map_err(|e| Failure::invalid(e.to_string()))?;
        Ok(())
    })
}
