//! C interface to the tinyinfer engine.
//!
//! Objects are opaque handles created by `ti_*_new`/`ti_*_load`/`ti_*_build`
//! functions and released by the matching `ti_*_free`. Every fallible call
//! returns a [`TiStatus`]; on failure `ti_last_error()` describes the error
//! on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use tinyinfer::graph::{build_squeezenet, calibrate, synthetic_weights, BuildOptions, Graph, QuantMode, Session};
use tinyinfer::model_io::{load_input, load_weights, save_weights, Preprocess, WeightStore};
use tinyinfer::ops::top_k;
use tinyinfer::{Error, Shape, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TiStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    Version = 4,
    Corrupt = 5,
    Shape = 6,
    Dtype = 7,
    Argument = 8,
    Build = 9,
    Report = 10,
    Bounds = 11,
    Panic = 12,
}

impl From<&Error> for TiStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io(_) => TiStatus::Io,
            Error::Format(_) => TiStatus::Format,
            Error::Version { .. } => TiStatus::Version,
            Error::Corrupt { .. } => TiStatus::Corrupt,
            Error::Shape(_) | Error::Size(_) => TiStatus::Shape,
            Error::DType { .. } => TiStatus::Dtype,
            Error::Argument(_) => TiStatus::Argument,
            Error::Build { .. } => TiStatus::Build,
            Error::Report(_) => TiStatus::Report,
            Error::Bounds(_) => TiStatus::Bounds,
        }
    }
}

/// Activation precision between integer convolutions.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TiQuantMode {
    Requantize = 0,
    FloatBetweenLayers = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TiBuildOptions {
    pub quantized: bool,
    pub quant_mode: TiQuantMode,
    /// Include the attenuation layer.
    pub use_attenuation: bool,
    pub attenuation: f32,
}

/// Loaded weights.
pub struct TiWeights(WeightStore);

/// A built network, shareable between sessions.
pub struct TiGraph(Arc<Graph>);

/// Buffers and workers for running one graph.
pub struct TiSession(Session);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F>(f: F) -> TiStatus
where
    F: FnOnce() -> Result<(), (TiStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TiStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TiStatus::Panic
        }
    }
}

fn fail(e: Error) -> (TiStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (TiStatus, String) {
    (TiStatus::NullPointer, format!("`{what}` is null"))
}

fn arg(msg: impl Into<String>) -> (TiStatus, String) {
    (TiStatus::Argument, msg.into())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (TiStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| arg(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, (TiStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message describing the last failed call on this thread, or null.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ti_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ti_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default options: float, attenuation layer present with coefficient 1.
#[no_mangle]
pub extern "C" fn ti_build_options_default() -> TiBuildOptions {
    TiBuildOptions {
        quantized: false,
        quant_mode: TiQuantMode::Requantize,
        use_attenuation: true,
        attenuation: 1.0,
    }
}

/// Reads a TIWF file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ti_weights_load(path: *const c_char, out: *mut *mut TiWeights) -> TiStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let store = load_weights(path_arg(path, "path")?).map_err(fail)?;
        *out = Box::into_raw(Box::new(TiWeights(store)));
        Ok(())
    })
}

/// Seeded random SqueezeNet weights.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ti_weights_synthetic(seed: u64, out: *mut *mut TiWeights) -> TiStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(TiWeights(synthetic_weights(seed).map_err(fail)?)));
        Ok(())
    })
}

/// Writes weights to a TIWF file.
///
/// # Safety
/// `weights` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ti_weights_save(weights: *const TiWeights, path: *const c_char) -> TiStatus {
    guard(|| {
        let w = weights.as_ref().ok_or_else(|| null("weights"))?;
        save_weights(&w.0, path_arg(path, "path")?).map_err(fail)
    })
}

/// Records activation ranges from `count` input files so quantized graphs
/// can be built.
///
/// # Safety
/// `weights` must come from this library; `paths` must hold `count`
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ti_weights_calibrate(
    weights: *mut TiWeights,
    paths: *const *const c_char,
    count: usize,
    workers: usize,
) -> TiStatus {
    guard(|| {
        let w = weights.as_mut().ok_or_else(|| null("weights"))?;
        if paths.is_null() {
            return Err(null("paths"));
        }
        let pre = w.0.preprocess();
        let mut inputs = Vec::with_capacity(count);
        for i in 0..count {
            let p = path_arg(*paths.add(i), "paths[i]")?;
            inputs.push(load_input(p, &pre).map_err(fail)?);
        }
        calibrate(&mut w.0, &inputs, &BuildOptions::default(), workers).map_err(fail)
    })
}

/// Number of stored entries, including metadata.
///
/// # Safety
/// `weights` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ti_weights_len(weights: *const TiWeights) -> usize {
    weights.as_ref().map_or(0, |w| w.0.len())
}

/// # Safety
/// `weights` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ti_weights_free(weights: *mut TiWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Builds SqueezeNet v1.0 for a 1×3×227×227 input. `options` may be null
/// for the defaults.
///
/// # Safety
/// `weights` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ti_graph_build_squeezenet(
    weights: *const TiWeights,
    options: *const TiBuildOptions,
    out: *mut *mut TiGraph,
) -> TiStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let w = weights.as_ref().ok_or_else(|| null("weights"))?;
        let o = options.as_ref().copied().unwrap_or_else(|| ti_build_options_default());
        let opts = BuildOptions {
            quantized: o.quantized,
            quant_mode: match o.quant_mode {
                TiQuantMode::Requantize => QuantMode::Requantize,
                TiQuantMode::FloatBetweenLayers => QuantMode::FloatBetweenLayers,
            },
            attenuation: o.use_attenuation.then_some(o.attenuation),
            ..BuildOptions::default()
        };
        let g = build_squeezenet(&w.0, &opts).map_err(fail)?;
        *out = Box::into_raw(Box::new(TiGraph(Arc::new(g))));
        Ok(())
    })
}

/// Number of input elements the graph expects.
///
/// # Safety
/// `graph` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ti_graph_input_len(graph: *const TiGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.0.input_shape().numel())
}

/// Number of output probabilities.
///
/// # Safety
/// `graph` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ti_graph_output_len(graph: *const TiGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.0.output_shape().numel())
}

/// # Safety
/// `graph` must come from this library or be null; it must not be used
/// afterwards. Sessions created from it stay valid.
#[no_mangle]
pub unsafe extern "C" fn ti_graph_free(graph: *mut TiGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Allocates buffers and `workers` threads for running `graph`.
///
/// # Safety
/// `graph` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ti_session_new(graph: *const TiGraph, workers: usize, out: *mut *mut TiSession) -> TiStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let s = Session::new(Arc::clone(&g.0), workers).map_err(fail)?;
        *out = Box::into_raw(Box::new(TiSession(s)));
        Ok(())
    })
}

/// Runs one inference on a planar float input and copies the
/// probabilities into `probs`.
///
/// # Safety
/// `input` must hold `input_len` floats and `probs` room for `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn ti_session_run(
    session: *mut TiSession,
    input: *const f32,
    input_len: usize,
    probs: *mut f32,
    probs_len: usize,
) -> TiStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        let shape = s.0.graph().input_shape();
        if input_len != shape.numel() {
            return Err((
                TiStatus::Shape,
                format!("input has {input_len} values, graph expects {}", shape.numel()),
            ));
        }
        let x = Tensor::from_vec(shape, std::slice::from_raw_parts(input, input_len).to_vec()).map_err(fail)?;
        let (p, _) = s.0.run(&x).map_err(fail)?;
        let p = p.as_f32().map_err(fail)?;
        if probs_len < p.len() {
            return Err((
                TiStatus::Shape,
                format!("output buffer holds {probs_len} values, need {}", p.len()),
            ));
        }
        std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(p);
        Ok(())
    })
}

/// # Safety
/// `session` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ti_session_free(session: *mut TiSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Reads a TIRAW001 or TIF32001 file into `data` (planar, 3×227×227),
/// using the preprocessing recorded in `weights` or the defaults when
/// `weights` is null.
///
/// # Safety
/// `path` must be NUL-terminated; `data` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ti_input_load(
    path: *const c_char,
    weights: *const TiWeights,
    data: *mut f32,
    len: usize,
) -> TiStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let pre = weights.as_ref().map_or_else(Preprocess::default, |w| w.0.preprocess());
        let t = load_input(path_arg(path, "path")?, &pre).map_err(fail)?;
        let v = t.as_f32().map_err(fail)?;
        if len < v.len() {
            return Err((
                TiStatus::Shape,
                format!("buffer holds {len} values, input has {}", v.len()),
            ));
        }
        std::slice::from_raw_parts_mut(data, v.len()).copy_from_slice(v);
        Ok(())
    })
}

/// The `k` most probable classes, highest first, ties to the lower index.
///
/// # Safety
/// `probs` must hold `len` floats; `classes` and `values` room for `k` entries.
#[no_mangle]
pub unsafe extern "C" fn ti_top_k(
    probs: *const f32,
    len: usize,
    k: usize,
    classes: *mut usize,
    values: *mut f32,
) -> TiStatus {
    guard(|| {
        if probs.is_null() || classes.is_null() || values.is_null() {
            return Err(null("probs, classes or values"));
        }
        let shape = Shape::new(1, len, 1, 1).map_err(fail)?;
        let t = Tensor::from_vec(shape, std::slice::from_raw_parts(probs, len).to_vec()).map_err(fail)?;
        for (i, (c, p)) in top_k(&t, k).map_err(fail)?.into_iter().enumerate() {
            *classes.add(i) = c;
            *values.add(i) = p;
        }
        Ok(())
    })
}
