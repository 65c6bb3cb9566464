//! C interface to the `mrckg` library.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_load`/`*_build`/`*_train` function and released by the matching `*_free`.
//! Functions return an [`MrckgStatus`]; on failure the message is kept per
//! thread and can be copied out with [`mrckg_last_error`]. Panics never cross
//! the boundary, they surface as `MRCKG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mrckg::backbone::{load_checkpoint, ModelParams, Scorer};
use mrckg::bench::{
    build_sequence, load_benchmark, synth_base, synth_features, BuildConfig, Strategy, SynthBaseConfig,
    SynthFeatureConfig,
};
use mrckg::eval::{avg_metrics, bwt, evaluate_model, Cell, MetricMatrix};
use mrckg::graph::{validate_sequence, ModalityStore, SnapshotSequence};
use mrckg::trainer::{grad_suite, run_sequence, TrainConfig};
use mrckg::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrckgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Parse = 5,
    Validation = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Benchmark handle: a validated snapshot sequence with its modality store.
pub struct MrckgBenchmark {
    seq: SnapshotSequence,
    store: ModalityStore,
}

/// Model handle loaded from a checkpoint directory.
pub struct MrckgModel {
    params: ModelParams,
}

/// Metric matrix handle, produced by training.
pub struct MrckgMatrix {
    matrix: MetricMatrix,
}

/// Metrics of one (model, test set) pair.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MrckgCell {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub queries: u64,
}

impl From<&Cell> for MrckgCell {
    fn from(c: &Cell) -> Self {
        MrckgCell {
            mrr: c.mrr,
            hits1: c.hits1,
            hits3: c.hits3,
            hits10: c.hits10,
            queries: c.queries as u64,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(MrckgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Contract(_) => MrckgStatus::InvalidArgument,
            Error::OutOfRange(_) => MrckgStatus::OutOfRange,
            Error::NonFinite(_) => MrckgStatus::Numeric,
            Error::Validation(_) => MrckgStatus::Validation,
            Error::Parse { .. } | Error::Json { .. } => MrckgStatus::Parse,
            Error::Io { .. } => MrckgStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn fail<T>(status: MrckgStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, records any error and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MrckgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MrckgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MrckgStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(MrckgStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(MrckgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .map_or_else(|| fail(MrckgStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .map_or_else(|| fail(MrckgStatus::NullPointer, format!("{what} is null")), Ok)
}

fn checked_bench(seq: SnapshotSequence, store: ModalityStore) -> Result<MrckgBenchmark, Fail> {
    let report = validate_sequence(&seq);
    if !report.is_valid() {
        let first = report.violations.first().map(|v| v.to_string()).unwrap_or_default();
        return fail(
            MrckgStatus::Validation,
            format!("{} violation(s), first: {first}", report.violations.len()),
        );
    }
    Ok(MrckgBenchmark { seq, store })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mrckg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length in bytes.
/// `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn mrckg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a benchmark directory written by `mrckg bench build`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mrckg_benchmark_load(dir: *const c_char, out: *mut *mut MrckgBenchmark) -> MrckgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let (seq, store) = load_benchmark(&dir, (16, 16))?;
        *out = Box::into_raw(Box::new(checked_bench(seq, store)?));
        Ok(())
    })
}

/// Builds a synthetic benchmark in memory: an `entities`-node community graph
/// with correlated features, cut into `snapshots` snapshots. `strategy` is 0
/// (entity), 1 (higher) or 2 (equal).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mrckg_benchmark_build_synthetic(
    entities: usize,
    snapshots: usize,
    strategy: u32,
    seed: u64,
    out: *mut *mut MrckgBenchmark,
) -> MrckgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let strategy = match strategy {
            0 => Strategy::Entity,
            1 => Strategy::Higher,
            2 => Strategy::Equal,
            s => return fail(MrckgStatus::InvalidArgument, format!("unknown strategy {s}")),
        };
        let (base, community) = synth_base(&SynthBaseConfig {
            entities,
            seed,
            ..SynthBaseConfig::default()
        })?;
        let built = build_sequence(
            &base,
            &BuildConfig {
                snapshots,
                strategy,
                seed,
                ..BuildConfig::default()
            },
        )?;
        let store = built.remap_store(&synth_features(&community, &SynthFeatureConfig::default(), seed)?)?;
        *out = Box::into_raw(Box::new(checked_bench(built.sequence, store)?));
        Ok(())
    })
}

/// # Safety
/// `bench` must be null or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn mrckg_benchmark_free(bench: *mut MrckgBenchmark) {
    if !bench.is_null() {
        drop(Box::from_raw(bench));
    }
}

/// # Safety
/// `bench` must be a live handle (or null, which yields 0).
#[no_mangle]
pub unsafe extern "C" fn mrckg_benchmark_snapshot_count(bench: *const MrckgBenchmark) -> usize {
    bench.as_ref().map_or(0, |b| b.seq.len())
}

/// Entity, relation and split sizes of snapshot `i`.
///
/// # Safety
/// `bench` must be a live handle; each output pointer must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mrckg_benchmark_snapshot_sizes(
    bench: *const MrckgBenchmark,
    i: usize,
    entities: *mut usize,
    train: *mut usize,
    valid: *mut usize,
    test: *mut usize,
) -> MrckgStatus {
    guard(|| {
        let b = handle(bench, "bench")?;
        let s = b.seq.get(i)?;
        for (p, v) in [
            (entities, s.entity_count),
            (train, s.train.len()),
            (valid, s.valid.len()),
            (test, s.test.len()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Loads a checkpoint directory (for a run: `<run>/s<i>/checkpoint`).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mrckg_model_load(dir: *const c_char, out: *mut *mut MrckgModel) -> MrckgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let (params, _) = load_checkpoint(&dir)?;
        *out = Box::into_raw(Box::new(MrckgModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrckg_model_free(model: *mut MrckgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle (or null, which yields 0).
#[no_mangle]
pub unsafe extern "C" fn mrckg_model_entity_count(model: *const MrckgModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.entity_count())
}

/// Writes the score of every tail entity for `(head, relation)` into
/// `scores[0..entity_count)`.
///
/// # Safety
/// Handles must be live; `scores` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn mrckg_model_score_tails(
    model: *const MrckgModel,
    bench: *const MrckgBenchmark,
    head: u32,
    relation: u32,
    scores: *mut f64,
    len: usize,
) -> MrckgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let b = handle(bench, "bench")?;
        if scores.is_null() {
            return fail(MrckgStatus::NullPointer, "scores is null");
        }
        let n = m.params.entity_count();
        if len < n {
            return fail(MrckgStatus::BufferTooSmall, format!("need {n} slots, got {len}"));
        }
        let row = Scorer::new(&m.params, &b.store).score_all_tails(head, relation)?;
        std::slice::from_raw_parts_mut(scores, n).copy_from_slice(&row);
        Ok(())
    })
}

/// Filtered metrics of `model` on test_0 .. test_i. `cells` receives `i + 1`
/// entries.
///
/// # Safety
/// Handles must be live; `cells` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn mrckg_model_evaluate(
    model: *const MrckgModel,
    bench: *const MrckgBenchmark,
    i: usize,
    cells: *mut MrckgCell,
    len: usize,
) -> MrckgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let b = handle(bench, "bench")?;
        if cells.is_null() {
            return fail(MrckgStatus::NullPointer, "cells is null");
        }
        if len < i + 1 {
            return fail(MrckgStatus::BufferTooSmall, format!("need {} cells, got {len}", i + 1));
        }
        let row = evaluate_model(&m.params, &b.seq, i, &b.store)?;
        let dst = std::slice::from_raw_parts_mut(cells, row.len());
        for (d, c) in dst.iter_mut().zip(&row) {
            *d = c.into();
        }
        Ok(())
    })
}

/// Trains over the whole sequence and writes the run directory `out_dir`.
/// `config_json` holds a training configuration (null or "" for defaults).
///
/// # Safety
/// `bench` must be a live handle, strings NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mrckg_train(
    bench: *const MrckgBenchmark,
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut MrckgMatrix,
) -> MrckgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let b = handle(bench, "bench")?;
        let dir = path_arg(out_dir, "out_dir")?;
        let text = if config_json.is_null() {
            ""
        } else {
            str_arg(config_json, "config_json")?
        };
        let mut cfg: TrainConfig = if text.trim().is_empty() {
            TrainConfig::default()
        } else {
            serde_json::from_str(text).or_else(|e| fail(MrckgStatus::Parse, format!("config: {e}")))?
        };
        cfg.model.d_v = b.store.d_v();
        cfg.model.d_w = b.store.d_w();
        let run = run_sequence(&b.seq, &b.store, cfg, &dir)?;
        *out = Box::into_raw(Box::new(MrckgMatrix { matrix: run.matrix }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrckg_matrix_free(m: *mut MrckgMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Cell `(i, j)`: model after snapshot i on test_j, defined for `j <= i`.
///
/// # Safety
/// `m` must be a live handle and `cell` valid.
#[no_mangle]
pub unsafe extern "C" fn mrckg_matrix_get(
    m: *const MrckgMatrix,
    i: usize,
    j: usize,
    cell: *mut MrckgCell,
) -> MrckgStatus {
    guard(|| {
        let m = handle(m, "matrix")?;
        let cell = out_ptr(cell, "cell")?;
        match m.matrix.get(i, j) {
            Some(c) => {
                *cell = c.into();
                Ok(())
            }
            None => fail(MrckgStatus::OutOfRange, format!("no cell ({i}, {j})")),
        }
    })
}

/// Average MRR over the final row and backward transfer.
///
/// # Safety
/// `m` must be a live handle; output pointers valid or null.
#[no_mangle]
pub unsafe extern "C" fn mrckg_matrix_summary(
    m: *const MrckgMatrix,
    avg_mrr: *mut f64,
    bwt_out: *mut f64,
) -> MrckgStatus {
    guard(|| {
        let m = handle(m, "matrix")?;
        let avg = avg_metrics(&m.matrix).map_or(f64::NAN, |a| a.mrr);
        if let Some(p) = avg_mrr.as_mut() {
            *p = avg;
        }
        if let Some(p) = bwt_out.as_mut() {
            *p = bwt(&m.matrix).unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Finite-difference check of every loss term on the toy model. Writes the
/// largest relative error and returns `MRCKG_STATUS_NUMERIC` if it is 1e-4 or
/// more.
///
/// # Safety
/// `max_rel_error` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mrckg_selfcheck_grad(seed: u64, max_rel_error: *mut f64) -> MrckgStatus {
    guard(|| {
        let suite = grad_suite(seed)?;
        let worst = suite.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
        if let Some(p) = max_rel_error.as_mut() {
            *p = worst;
        }
        if !suite.passes(1e-4) {
            return fail(MrckgStatus::Numeric, format!("max relative error {worst:e}"));
        }
        Ok(())
    })
}
