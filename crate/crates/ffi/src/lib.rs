//! C ABI for the `upplda` back-end.
//!
//! Every function returns an [`UppldaStatus`]. On failure a description of the
//! error is available from [`upplda_last_error_message`] on the calling
//! thread. Objects are handed out as opaque pointers and must be released with
//! the matching `*_free` function. Arrays are `double` buffers whose length is
//! given by an explicit `dim` argument; matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::slice;

use upplda::metrics::{eer, min_dcf, DcfParams, ScoreSet};
use upplda::pooling::{
    pool_posterior, propagate_through_head, FrameEstimate, GaussianPrior, HeadParams, PosteriorStats,
};
use upplda::preprocess::{length_scale, CenteringStats, LengthScaleForm};
use upplda::{storage, Error, PldaModel, ScoringMode, UncertainEmbedding};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UppldaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UppldaScoringMode {
    /// Uncertainties are ignored.
    Plda = 0,
    UpPlda = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UppldaLengthScaleForm {
    Mahalanobis = 0,
    Literal = 1,
}

/// A trained PLDA model.
pub struct UppldaModel(PldaModel);

/// Pooling-head parameters (batch norm and affine layer).
pub struct UppldaHead(HeadParams);

/// Centering statistics: mean and total covariance.
pub struct UppldaStats(CenteringStats);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(UppldaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => UppldaStatus::Io,
            Error::Format(_) => UppldaStatus::Format,
            Error::NotPositiveDefinite(_) | Error::Degenerate(_) | Error::ZeroVector(_) => UppldaStatus::Numerical,
            _ => UppldaStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UppldaStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UppldaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            UppldaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            UppldaStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(UppldaStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// A null `unc` means zero uncertainty.
unsafe fn embedding(id: &str, vec: *const f64, unc: *const f64, dim: usize) -> Result<UncertainEmbedding, Failure> {
    let v = input(vec, dim, id)?.to_vec();
    let u = if unc.is_null() {
        vec![0.0; dim]
    } else {
        input(unc, dim, id)?.to_vec()
    };
    Ok(UncertainEmbedding::new(id, v, u))
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn upplda_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn upplda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model archive written by `upplda train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upplda_model_load(path: *const c_char, out: *mut *mut UppldaModel) -> UppldaStatus {
    guard(|| {
        let m = storage::read_model(path_arg(path)?)?;
        emit(out, UppldaModel(m))
    })
}

/// Model with `Φ_B = diag(between)` and `Σ = diag(residual)`.
///
/// # Safety
/// The three arrays must hold `dim` values; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upplda_model_from_diagonal(
    dim: usize,
    mean: *const f64,
    between: *const f64,
    residual: *const f64,
    out: *mut *mut UppldaModel,
) -> UppldaStatus {
    guard(|| {
        let m = PldaModel::from_diagonal(
            input(mean, dim, "mean")?.to_vec(),
            input(between, dim, "between")?.to_vec(),
            input(residual, dim, "residual")?.to_vec(),
        )?;
        emit(out, UppldaModel(m))
    })
}

/// # Safety
/// `model` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn upplda_model_free(model: *mut UppldaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn upplda_model_dim(model: *const UppldaModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// Log-likelihood ratio of one trial. Uncertainty arrays may be null (zero
/// uncertainty); they are ignored in `UPPLDA_SCORING_MODE_PLDA`.
///
/// # Safety
/// Non-null arrays must hold `dim` values; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upplda_score(
    model: *const UppldaModel,
    mode: UppldaScoringMode,
    dim: usize,
    enroll_vec: *const f64,
    enroll_unc: *const f64,
    test_vec: *const f64,
    test_unc: *const f64,
    out: *mut f64,
) -> UppldaStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let out = output(out, 1, "out")?;
        let e = embedding("enroll", enroll_vec, enroll_unc, dim)?;
        let t = embedding("test", test_vec, test_unc, dim)?;
        let mode = match mode {
            UppldaScoringMode::Plda => ScoringMode::Plda,
            UppldaScoringMode::UpPlda => ScoringMode::UpPlda,
        };
        out[0] = model.score(&e, &t, mode)?;
        Ok(())
    })
}

/// Pools `n_frames` frame estimates into a Gaussian posterior. `means` and
/// `precisions` are `n_frames × dim` row-major. Null prior arrays select the
/// standard prior `(0, I)`.
///
/// # Safety
/// Arrays must have the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn upplda_pool_posterior(
    dim: usize,
    n_frames: usize,
    means: *const f64,
    precisions: *const f64,
    prior_mean: *const f64,
    prior_precision: *const f64,
    out_mean: *mut f64,
    out_precision: *mut f64,
) -> UppldaStatus {
    guard(|| {
        let len = n_frames
            .checked_mul(dim)
            .ok_or_else(|| Failure(UppldaStatus::InvalidArgument, "n_frames * dim overflows".into()))?;
        let (m, p) = if len == 0 {
            (&[][..], &[][..])
        } else {
            (input(means, len, "means")?, input(precisions, len, "precisions")?)
        };
        let frames: Vec<FrameEstimate> = m
            .chunks(dim.max(1))
            .zip(p.chunks(dim.max(1)))
            .map(|(m, p)| FrameEstimate::new(m.to_vec(), p.to_vec()))
            .collect();
        let prior = match (prior_mean.is_null(), prior_precision.is_null()) {
            (true, true) => GaussianPrior::standard(dim),
            _ => GaussianPrior {
                mean: input(prior_mean, dim, "prior_mean")?.to_vec(),
                precision: input(prior_precision, dim, "prior_precision")?.to_vec(),
            },
        };
        let post = pool_posterior(&frames, &prior)?;
        output(out_mean, dim, "out_mean")?.copy_from_slice(&post.mean);
        output(out_precision, dim, "out_precision")?.copy_from_slice(&post.precision);
        Ok(())
    })
}

/// Loads pooling-head parameters.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upplda_head_load(path: *const c_char, out: *mut *mut UppldaHead) -> UppldaStatus {
    guard(|| {
        let h = storage::read_head(path_arg(path)?)?;
        emit(out, UppldaHead(h))
    })
}

/// # Safety
/// `head` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn upplda_head_free(head: *mut UppldaHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Input and output dimensions of the head; either pointer may be null.
///
/// # Safety
/// `head` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn upplda_head_dims(
    head: *const UppldaHead,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> UppldaStatus {
    guard(|| {
        let h = &handle(head, "head")?.0;
        if let Some(d) = input_dim.as_mut() {
            *d = h.input_dim();
        }
        if let Some(d) = output_dim.as_mut() {
            *d = h.output_dim();
        }
        Ok(())
    })
}

/// Maps a pooled posterior through the head to an embedding and its diagonal
/// uncertainty. Inputs hold the head's input dimension, outputs its output dimension.
///
/// # Safety
/// Arrays must have the sizes given by `upplda_head_dims`.
#[no_mangle]
pub unsafe extern "C" fn upplda_head_propagate(
    head: *const UppldaHead,
    post_mean: *const f64,
    post_precision: *const f64,
    out_vec: *mut f64,
    out_unc: *mut f64,
) -> UppldaStatus {
    guard(|| {
        let h = &handle(head, "head")?.0;
        let (din, dout) = (h.input_dim(), h.output_dim());
        let post = PosteriorStats {
            mean: input(post_mean, din, "post_mean")?.to_vec(),
            precision: input(post_precision, din, "post_precision")?.to_vec(),
        };
        let e = propagate_through_head("", &post, h)?;
        output(out_vec, dout, "out_vec")?.copy_from_slice(e.vector());
        output(out_unc, dout, "out_unc")?.copy_from_slice(&e.uncertainty);
        Ok(())
    })
}

/// Loads centering statistics written by `upplda train --stats-out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upplda_stats_load(path: *const c_char, out: *mut *mut UppldaStats) -> UppldaStatus {
    guard(|| {
        let s = storage::read_stats(path_arg(path)?)?;
        emit(out, UppldaStats(s))
    })
}

/// # Safety
/// `stats` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn upplda_stats_free(stats: *mut UppldaStats) {
    if !stats.is_null() {
        drop(Box::from_raw(stats));
    }
}

/// Length-scales one embedding. With `uncertainty_aware` the scaling
/// covariance includes `diag(unc)`. A null `unc` means zero uncertainty;
/// `out_unc` may be null if the scaled uncertainty is not wanted.
///
/// # Safety
/// Non-null arrays must hold `dim` values.
#[no_mangle]
pub unsafe extern "C" fn upplda_length_scale(
    stats: *const UppldaStats,
    form: UppldaLengthScaleForm,
    uncertainty_aware: bool,
    dim: usize,
    vec: *const f64,
    unc: *const f64,
    out_vec: *mut f64,
    out_unc: *mut f64,
) -> UppldaStatus {
    guard(|| {
        let s = &handle(stats, "stats")?.0;
        let e = embedding("embedding", vec, unc, dim)?;
        let form = match form {
            UppldaLengthScaleForm::Mahalanobis => LengthScaleForm::Mahalanobis,
            UppldaLengthScaleForm::Literal => LengthScaleForm::Literal,
        };
        let scaled = length_scale(&e, s, form, uncertainty_aware)?;
        output(out_vec, dim, "out_vec")?.copy_from_slice(scaled.vector());
        if !out_unc.is_null() {
            output(out_unc, dim, "out_unc")?.copy_from_slice(&scaled.uncertainty);
        }
        Ok(())
    })
}

unsafe fn score_set(
    targets: *const f64,
    n_targets: usize,
    nontargets: *const f64,
    n_nontargets: usize,
) -> Result<ScoreSet, Failure> {
    let t = if n_targets == 0 {
        &[][..]
    } else {
        input(targets, n_targets, "targets")?
    };
    let n = if n_nontargets == 0 {
        &[][..]
    } else {
        input(nontargets, n_nontargets, "nontargets")?
    };
    Ok(ScoreSet::from_scores(t, n))
}

/// Equal error rate as a fraction.
///
/// # Safety
/// `targets` and `nontargets` must hold the given number of scores.
#[no_mangle]
pub unsafe extern "C" fn upplda_eer(
    targets: *const f64,
    n_targets: usize,
    nontargets: *const f64,
    n_nontargets: usize,
    out: *mut f64,
) -> UppldaStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        out[0] = eer(&score_set(targets, n_targets, nontargets, n_nontargets)?)?;
        Ok(())
    })
}

/// Normalized minimum detection cost.
///
/// # Safety
/// `targets` and `nontargets` must hold the given number of scores.
#[no_mangle]
pub unsafe extern "C" fn upplda_min_dcf(
    targets: *const f64,
    n_targets: usize,
    nontargets: *const f64,
    n_nontargets: usize,
    p_target: f64,
    c_fa: f64,
    c_miss: f64,
    out: *mut f64,
) -> UppldaStatus {
    guard(|| {
        let out = output(out, 1, "out")?;
        let params = DcfParams { p_target, c_fa, c_miss };
        out[0] = min_dcf(&score_set(targets, n_targets, nontargets, n_nontargets)?, &params)?;
        Ok(())
    })
}
