//! C ABI over `grpattn`.
//!
//! Every fallible function returns a [`GaStatus`]. On failure the message is
//! available from [`ga_last_error_message`] on the same thread until the next
//! failing call. Objects are opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Matrices are row-major
//! `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use grpattn::attention::{attention_head, group_attention_head};
use grpattn::grouping::kmeans_group;
use grpattn::planner::{plan_batches, predict_batch, BatchPlan, MemoryModel};
use grpattn::train::{forecast, impute};
use grpattn::{Checkpoint, Error, Grouping, Matrix, Timeseries};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Parse = 5,
    Numeric = 6,
    Internal = 7,
}

/// K-means grouping of key vectors.
pub struct GaGrouping(Grouping);

/// Trained model with its input scaler.
pub struct GaModel(Checkpoint);

/// Fitted batch size plan.
pub struct GaPlan(BatchPlan);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GaStatus {
    match e {
        Error::Shape { .. } | Error::InputTooShort { .. } => GaStatus::Shape,
        Error::Io { .. } => GaStatus::Io,
        Error::Parse(_) | Error::Json(_) => GaStatus::Parse,
        Error::NonFinite(_) | Error::DegenerateAttention { .. } => GaStatus::Numeric,
        _ => GaStatus::InvalidArgument,
    }
}

struct Fail(GaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GaStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GaStatus::Internal
        }
    }
}

/// # Safety
/// `p` must be null or point to `rows * cols` readable doubles.
unsafe fn read_matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(GaStatus::InvalidArgument, format!("{what}: {rows} x {cols} overflows")))?;
    // SAFETY: caller guarantees `len` readable doubles at `p`.
    let data = unsafe { std::slice::from_raw_parts(p, len) }.to_vec();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

/// # Safety
/// `out` must be null or point to `m.data().len()` writable doubles.
unsafe fn write_matrix(out: *mut f64, m: &Matrix, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees the buffer holds `m.data().len()` doubles.
    unsafe { ptr::copy_nonoverlapping(m.data().as_ptr(), out, m.data().len()) };
    Ok(())
}

fn boxed<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: checked non-null; the caller provides a writable slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// # Safety
/// `p` must be null or a live handle from this library.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: caller guarantees a live handle when non-null.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ga_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ga_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Groups `n` keys of dimension `d` into `n_groups` clusters.
///
/// # Safety
/// `keys` must hold `n * d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ga_grouping_kmeans(
    keys: *const f64,
    n: usize,
    d: usize,
    n_groups: usize,
    iters: usize,
    seed: u64,
    out: *mut *mut GaGrouping,
) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let keys = unsafe { read_matrix(keys, n, d, "keys") }?;
        let g = kmeans_group(&keys, n_groups, iters, seed)?;
        boxed(out, GaGrouping(g), "out")
    })
}

/// # Safety
/// `g` must be a live grouping handle or null.
#[no_mangle]
pub unsafe extern "C" fn ga_grouping_n_groups(g: *const GaGrouping, out: *mut usize) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let g = unsafe { handle(g, "grouping") }?;
        // SAFETY: non-null checked before the write.
        unsafe { out.as_mut() }.map(|o| *o = g.0.n_groups()).ok_or_else(|| null("out"))
    })
}

/// Writes the group index of each of the `len` keys.
///
/// # Safety
/// `out` must hold `len` writable entries.
#[no_mangle]
pub unsafe extern "C" fn ga_grouping_assignment(g: *const GaGrouping, out: *mut usize, len: usize) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let g = unsafe { handle(g, "grouping") }?;
        let belong = g.0.belong();
        if len != belong.len() {
            return Err(Fail(
                GaStatus::Shape,
                format!("buffer of {len} for {} keys", belong.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: `out` holds `len` entries.
        unsafe { ptr::copy_nonoverlapping(belong.as_ptr(), out, len) };
        Ok(())
    })
}

/// Largest key-to-representative distance.
///
/// # Safety
/// `g` must be a live grouping handle or null.
#[no_mangle]
pub unsafe extern "C" fn ga_grouping_max_dist(g: *const GaGrouping, out: *mut f64) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let g = unsafe { handle(g, "grouping") }?;
        // SAFETY: non-null checked before the write.
        unsafe { out.as_mut() }.map(|o| *o = g.0.max_dist()).ok_or_else(|| null("out"))
    })
}

/// # Safety
/// `g` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ga_grouping_free(g: *mut GaGrouping) {
    if !g.is_null() {
        // SAFETY: created by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(g) });
    }
}

/// One head of group attention: queries `n × dk` attend to the centroids of
/// `g`, values `n × dv` are summed per group. Writes `n × dv`.
///
/// # Safety
/// Buffers must match the stated shapes.
#[no_mangle]
pub unsafe extern "C" fn ga_group_attention(
    q: *const f64,
    v: *const f64,
    n: usize,
    dk: usize,
    dv: usize,
    g: *const GaGrouping,
    scale: f64,
    out: *mut f64,
) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (q, v, g) = unsafe { (read_matrix(q, n, dk, "q")?, read_matrix(v, n, dv, "v")?, handle(g, "grouping")?) };
        let (o, _) = group_attention_head(&q, &v, &g.0, scale)?;
        // SAFETY: forwarded caller contract.
        unsafe { write_matrix(out, &o, "out") }
    })
}

/// One head of full softmax attention. Writes `n × dv`.
///
/// # Safety
/// Buffers must match the stated shapes.
#[no_mangle]
pub unsafe extern "C" fn ga_vanilla_attention(
    q: *const f64,
    k: *const f64,
    v: *const f64,
    n: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    out: *mut f64,
) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (q, k, v) = unsafe {
            (
                read_matrix(q, n, dk, "q")?,
                read_matrix(k, n, dk, "k")?,
                read_matrix(v, n, dv, "v")?,
            )
        };
        let (o, _) = attention_head(&q, &k, &v, scale)?;
        // SAFETY: forwarded caller contract.
        unsafe { write_matrix(out, &o, "out") }
    })
}

/// Loads a checkpoint written by the `grpattn` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ga_model_load(path: *const c_char, out: *mut *mut GaModel) -> GaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: caller guarantees a NUL-terminated string.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|e| Fail(GaStatus::InvalidArgument, format!("path is not UTF-8: {e}")))?;
        let ck = Checkpoint::load(Path::new(path))?;
        boxed(out, GaModel(ck), "out")
    })
}

/// Input channels the model expects.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ga_model_channels(model: *const GaModel, out: *mut usize) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let m = unsafe { handle(model, "model") }?;
        // SAFETY: non-null checked before the write.
        unsafe { out.as_mut() }
            .map(|o| *o = m.0.model.config.channels)
            .ok_or_else(|| null("out"))
    })
}

/// # Safety
/// `mask` must be null or hold `t * m` bytes.
unsafe fn series(model: &GaModel, values: *const f64, mask: *const u8, t: usize, m: usize) -> Result<Timeseries, Fail> {
    // SAFETY: forwarded caller contract.
    let values = unsafe { read_matrix(values, t, m, "values") }?;
    let ts = if mask.is_null() {
        Timeseries::new(values)
    } else {
        // SAFETY: caller guarantees `t * m` bytes.
        let mask = unsafe { std::slice::from_raw_parts(mask, t * m) };
        Timeseries::with_mask(values, mask.iter().map(|&b| b != 0).collect())?
    };
    Ok(model.0.scaler.transform(&ts)?)
}

/// Fills cells whose `mask` byte is nonzero; observed cells pass through.
/// `mask` may be null (nothing hidden). Writes `t × m` in input units.
///
/// # Safety
/// `values` and `out` hold `t * m` doubles, `mask` `t * m` bytes.
#[no_mangle]
pub unsafe extern "C" fn ga_model_impute(
    model: *const GaModel,
    values: *const f64,
    mask: *const u8,
    t: usize,
    m: usize,
    out: *mut f64,
) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let model = unsafe { handle(model, "model") }?;
        // SAFETY: forwarded caller contract.
        let ts = unsafe { series(model, values, mask, t, m) }?;
        let filled = impute(&model.0.model, &ts, None)?;
        let filled = model.0.scaler.inverse(&filled.completed)?;
        // SAFETY: forwarded caller contract.
        unsafe { write_matrix(out, &filled, "out") }
    })
}

/// Predicts the final `horizon` timestamps of a `t × m` series, ignoring
/// their current values. Writes `horizon × m` in input units.
///
/// # Safety
/// `values` holds `t * m` doubles, `out` `horizon * m`.
#[no_mangle]
pub unsafe extern "C" fn ga_model_forecast(
    model: *const GaModel,
    values: *const f64,
    t: usize,
    m: usize,
    horizon: usize,
    out: *mut f64,
) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let model = unsafe { handle(model, "model") }?;
        // SAFETY: forwarded caller contract.
        let ts = unsafe { series(model, values, ptr::null(), t, m) }?;
        let tail = forecast(&model.0.model, &ts, horizon)?;
        let tail = model.0.scaler.inverse(&tail)?;
        // SAFETY: forwarded caller contract.
        unsafe { write_matrix(out, &tail, "out") }
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ga_model_free(model: *mut GaModel) {
    if !model.is_null() {
        // SAFETY: created by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Plans batch sizes for sequence lengths up to `l_max` against the encoder
/// memory model with the given `budget`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ga_plan_new(
    budget: f64,
    d_model: usize,
    layers: usize,
    l_max: usize,
    min_points: usize,
    max_batch: u64,
    out: *mut *mut GaPlan,
) -> GaStatus {
    guard(|| {
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Fail(GaStatus::InvalidArgument, format!("budget {budget} must be positive")));
        }
        let memory = MemoryModel::for_encoder(budget, d_model, layers);
        let plan = plan_batches(&memory, l_max, min_points, max_batch)?;
        boxed(out, GaPlan(plan), "out")
    })
}

/// Predicted batch size for sequence length `l` with `n` groups.
///
/// # Safety
/// `plan` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ga_plan_predict(plan: *const GaPlan, l: usize, n: usize, out: *mut u64) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let plan = unsafe { handle(plan, "plan") }?;
        let b = predict_batch(&plan.0, l, n)?;
        // SAFETY: non-null checked before the write.
        unsafe { out.as_mut() }.map(|o| *o = b).ok_or_else(|| null("out"))
    })
}

/// Number of rectangles in the plan's partition.
///
/// # Safety
/// `plan` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ga_plan_pieces(plan: *const GaPlan, out: *mut usize) -> GaStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let plan = unsafe { handle(plan, "plan") }?;
        // SAFETY: non-null checked before the write.
        unsafe { out.as_mut() }
            .map(|o| *o = plan.0.partition.len())
            .ok_or_else(|| null("out"))
    })
}

/// # Safety
/// `plan` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ga_plan_free(plan: *mut GaPlan) {
    if !plan.is_null() {
        // SAFETY: created by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(plan) });
    }
}
