//! C interface to the clustering engine.
//!
//! Every function returns a [`DibcStatus`]. On failure the message is kept
//! per thread and read with [`dibc_last_error`]. Handles are opaque and must
//! be released with their matching `_free` function. Cluster labels crossing
//! the boundary are one-based.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dibc::artifacts::classify_points;
use dibc::estimate::{vi_distance, Loss};
use dibc::eval::compute_metrics;
use dibc::kernels::stream_rng;
use dibc::model::Points;
use dibc::params::{posterior_predictive_sample, PosteriorDraws};
use dibc::runtime::{run_pipeline, PipelineConfig, PipelineResult};
use dibc::Error;

/// Result codes. Values 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DibcStatus {
    Ok = 0,
    /// Null pointer, zero size or malformed string.
    InvalidArgument = 1,
    /// Bad data, parameters or configuration.
    Data = 2,
    Io = 3,
    Numerical = 4,
    /// Transport failure or an internal panic.
    Internal = 5,
}

/// Posterior draws of the model parameters.
pub struct DibcDraws {
    inner: PosteriorDraws,
}

/// Outcome of a full fit.
pub struct DibcFitResult {
    inner: PipelineResult,
}

/// Settings for [`dibc_fit`]. Start from [`dibc_fit_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DibcFitConfig {
    pub workers: usize,
    pub clusters: usize,
    pub subcomponents: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub refine_samples: usize,
    pub candidates: usize,
    pub param_iterations: usize,
    pub param_burn_in: usize,
    pub refine_alpha: f64,
    /// Nonzero selects the Binder loss instead of variation of information.
    pub binder_loss: u8,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DibcMetrics {
    pub accuracy: f64,
    pub ari: f64,
    pub f_measure: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DibcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => DibcStatus::Data,
            3 => DibcStatus::Io,
            4 => DibcStatus::Numerical,
            _ => DibcStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(what: &str) -> Failure {
    Failure(DibcStatus::InvalidArgument, what.to_string())
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DibcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DibcStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(message);
            DibcStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn points(values: *const f64, n: usize, dim: usize) -> Result<Points, Failure> {
    if dim == 0 {
        return Err(invalid("dimension must be positive"));
    }
    let len = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
    Ok(Points::new(dim, slice(values, len, "points")?.to_vec())?)
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid("handle is null"))
}

fn widen(labels: &[u32]) -> Vec<usize> {
    labels.iter().map(|&l| l as usize).collect()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dibc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads draws saved by a fit.
#[no_mangle]
pub unsafe extern "C" fn dibc_draws_load(file: *const c_char, out: *mut *mut DibcDraws) -> DibcStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let inner = PosteriorDraws::load(path(file)?)?;
        *out = Box::into_raw(Box::new(DibcDraws { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dibc_draws_save(draws: *const DibcDraws, file: *const c_char) -> DibcStatus {
    guard(|| {
        handle(draws)?.inner.save(path(file)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dibc_draws_free(draws: *mut DibcDraws) {
    if !draws.is_null() {
        drop(Box::from_raw(draws));
    }
}

/// Data dimension, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dibc_draws_dim(draws: *const DibcDraws) -> usize {
    draws.as_ref().map_or(0, |d| d.inner.dim())
}

/// Number of clusters, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dibc_draws_clusters(draws: *const DibcDraws) -> usize {
    draws.as_ref().map_or(0, |d| d.inner.clusters())
}

/// Number of stored draws, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dibc_draws_count(draws: *const DibcDraws) -> usize {
    draws.as_ref().map_or(0, |d| d.inner.draws.len())
}

/// Assigns `n` row-major points to clusters. `probs` may be null; otherwise
/// it receives `n * dibc_draws_clusters(draws)` values.
#[no_mangle]
pub unsafe extern "C" fn dibc_classify(
    draws: *const DibcDraws,
    values: *const f64,
    n: usize,
    dim: usize,
    labels: *mut u32,
    probs: *mut f64,
) -> DibcStatus {
    guard(|| {
        let draws = &handle(draws)?.inner;
        if dim != draws.dim() {
            return Err(invalid(&format!("points have {dim} columns, draws have {}", draws.dim())));
        }
        let pts = points(values, n, dim)?;
        let labels = slice_mut(labels, n, "labels")?;
        let assigned = classify_points(draws, &pts)?;
        let k = draws.clusters();
        let mut probs = if probs.is_null() {
            None
        } else {
            Some(slice_mut(probs, n * k, "probs")?)
        };
        for (i, (label, p)) in assigned.into_iter().enumerate() {
            labels[i] = label as u32;
            if let Some(out) = probs.as_deref_mut() {
                out[i * k..(i + 1) * k].copy_from_slice(&p);
            }
        }
        Ok(())
    })
}

/// Simulates `n` points from the posterior predictive into `values`
/// (`n * dim`, row-major) and their clusters into `clusters`.
#[no_mangle]
pub unsafe extern "C" fn dibc_predict(
    draws: *const DibcDraws,
    n: usize,
    seed: u64,
    values: *mut f64,
    clusters: *mut u32,
) -> DibcStatus {
    guard(|| {
        let draws = &handle(draws)?.inner;
        let dim = draws.dim();
        let out = slice_mut(values, n * dim, "values")?;
        let tags = slice_mut(clusters, n, "clusters")?;
        let (pts, drawn) = posterior_predictive_sample(draws, n, &mut stream_rng(seed, 0))?;
        out.copy_from_slice(pts.values());
        for (t, d) in tags.iter_mut().zip(drawn) {
            *t = d as u32 + 1;
        }
        Ok(())
    })
}

/// Variation of information between two labelings of `n` items.
#[no_mangle]
pub unsafe extern "C" fn dibc_vi_distance(a: *const u32, b: *const u32, n: usize, out: *mut f64) -> DibcStatus {
    guard(|| {
        let a = widen(slice(a, n, "a")?);
        let b = widen(slice(b, n, "b")?);
        let d = vi_distance(&a, &b)?;
        *out.as_mut().ok_or_else(|| invalid("out is null"))? = d;
        Ok(())
    })
}

/// Accuracy, adjusted Rand index and pair F-measure of `pred` against `truth`.
#[no_mangle]
pub unsafe extern "C" fn dibc_metrics(
    truth: *const u32,
    pred: *const u32,
    n: usize,
    out: *mut DibcMetrics,
) -> DibcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
        let t = widen(slice(truth, n, "truth")?);
        let p = widen(slice(pred, n, "pred")?);
        let m = compute_metrics(&t, &p)?;
        *out = DibcMetrics {
            accuracy: m.accuracy,
            ari: m.ari,
            f_measure: m.f_measure,
        };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn dibc_fit_config_default() -> DibcFitConfig {
    let d = PipelineConfig::default();
    DibcFitConfig {
        workers: d.workers,
        clusters: d.clusters,
        subcomponents: d.subcomponents,
        iterations: d.n_iters,
        burn_in: d.burn_in,
        refine_samples: d.refine_samples,
        candidates: d.candidates,
        param_iterations: d.param_iters,
        param_burn_in: d.param_burn_in,
        refine_alpha: d.refine_alpha,
        binder_loss: 0,
        seed: d.seed,
    }
}

/// Runs the full pipeline on `n` row-major points with in-process workers.
#[no_mangle]
pub unsafe extern "C" fn dibc_fit(
    values: *const f64,
    n: usize,
    dim: usize,
    config: *const DibcFitConfig,
    out: *mut *mut DibcFitResult,
) -> DibcStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let c = handle(config)?;
        let cfg = PipelineConfig {
            workers: c.workers,
            clusters: c.clusters,
            subcomponents: c.subcomponents,
            n_iters: c.iterations,
            burn_in: c.burn_in,
            refine_samples: c.refine_samples,
            candidates: c.candidates,
            param_iters: c.param_iterations,
            param_burn_in: c.param_burn_in,
            refine_alpha: c.refine_alpha,
            loss: if c.binder_loss != 0 { Loss::Binder } else { Loss::Vi },
            seed: c.seed,
            ..Default::default()
        };
        let pts = points(values, n, dim)?;
        let inner = run_pipeline(&cfg, &pts)?;
        *out = Box::into_raw(Box::new(DibcFitResult { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dibc_fit_result_free(result: *mut DibcFitResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Number of fitted rows, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn dibc_fit_result_len(result: *const DibcFitResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.clusters.len())
}

/// Copies the one-based cluster and subcomponent of every fitted row.
/// `subcomponents` may be null.
#[no_mangle]
pub unsafe extern "C" fn dibc_fit_result_labels(
    result: *const DibcFitResult,
    clusters: *mut u32,
    subcomponents: *mut u32,
) -> DibcStatus {
    guard(|| {
        let r = &handle(result)?.inner;
        let n = r.clusters.len();
        for (o, c) in slice_mut(clusters, n, "clusters")?.iter_mut().zip(&r.clusters) {
            *o = *c as u32 + 1;
        }
        if !subcomponents.is_null() {
            for (o, s) in slice_mut(subcomponents, n, "subcomponents")?.iter_mut().zip(&r.subcomponents) {
                *o = *s as u32 + 1;
            }
        }
        Ok(())
    })
}

/// Copies the fit's posterior draws into a new handle.
#[no_mangle]
pub unsafe extern "C" fn dibc_fit_result_draws(result: *const DibcFitResult, out: *mut *mut DibcDraws) -> DibcStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let inner = handle(result)?.inner.draws.clone();
        *out = Box::into_raw(Box::new(DibcDraws { inner }));
        Ok(())
    })
}
