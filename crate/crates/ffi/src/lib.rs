//! C ABI over `motion_code`.
//!
//! Handles are opaque pointers created by `mc_*_load` / `mc_train` and
//! released with the matching `mc_*_free`. Every fallible call returns an
//! [`McStatus`]; on failure `mc_last_error()` describes the error for the
//! calling thread. Inputs and outputs are in the data's original units.
//!
//! Panics never cross the boundary: they are caught and reported as
//! [`McStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use motion_code::data_io::{self, dataset_digest, Format, Loaded, ModelFile};
use motion_code::inference::Classifier;
use motion_code::types::{normalize_timestamps, Hyperparams, ModelParams, TimeSeries};
use motion_code::{train, Error};

/// Result codes. `Ok` is zero; every other value is an error.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Dataset = 5,
    Version = 6,
    Numerical = 7,
    UnknownClass = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McFormat {
    Ragged = 0,
    Ucr = 1,
}

/// Training hyperparameters; fill with `mc_hyperparams_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McHyperparams {
    pub m: usize,
    pub d: usize,
    pub num_components: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub max_iters: usize,
    pub epsilon: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl From<Hyperparams> for McHyperparams {
    fn from(h: Hyperparams) -> Self {
        Self {
            m: h.m,
            d: h.d,
            num_components: h.num_components,
            lambda: h.lambda,
            sigma: h.sigma,
            max_iters: h.max_iters,
            epsilon: h.epsilon,
            jitter: h.jitter,
            seed: h.seed,
        }
    }
}

impl From<McHyperparams> for Hyperparams {
    fn from(h: McHyperparams) -> Self {
        Self {
            m: h.m,
            d: h.d,
            num_components: h.num_components,
            lambda: h.lambda,
            sigma: h.sigma,
            max_iters: h.max_iters,
            epsilon: h.epsilon,
            jitter: h.jitter,
            seed: h.seed,
        }
    }
}

/// A loaded, normalized dataset with its label map.
pub struct McDataset {
    loaded: Loaded,
}

/// A model plus its parsed parameters.
pub struct McModel {
    file: ModelFile,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> McStatus {
    match err {
        Error::Range { .. } | Error::Invalid(_) | Error::Field { .. } | Error::Split(_) => McStatus::InvalidArgument,
        Error::Domain(_) | Error::Singular { .. } | Error::Numerical(_) => McStatus::Numerical,
        Error::Dataset(_) => McStatus::Dataset,
        Error::UnknownClass(_) => McStatus::UnknownClass,
        Error::Parse { .. } => McStatus::Parse,
        Error::Version { .. } => McStatus::Version,
        Error::Io { .. } => McStatus::Io,
    }
}

struct Failure(McStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(McStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for `mc_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> McStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            McStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(McStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn format_of(f: McFormat) -> Format {
    match f {
        McFormat::Ragged => Format::Ragged,
        McFormat::Ucr => Format::Ucr,
    }
}

/// Message for the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Writes the default hyperparameters to `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `McHyperparams`.
#[no_mangle]
pub unsafe extern "C" fn mc_hyperparams_default(out: *mut McHyperparams) -> McStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = Hyperparams::default().into();
        Ok(())
    })
}

/// Loads a training dataset, fitting its label map and scales.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mc_dataset_load(path: *const c_char, format: McFormat, out: *mut *mut McDataset) -> McStatus {
    guard(|| {
        let loaded = data_io::load(path_arg(path)?, format_of(format))?;
        put(out, McDataset { loaded })
    })
}

/// Loads a dataset using a model's label map and scales, as needed to pair
/// a saved model with its training data. Fails if the data does not match
/// the model's training digest.
///
/// # Safety
/// `model` must come from this library; `path` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mc_dataset_load_for_model(
    path: *const c_char,
    format: McFormat,
    model: *const McModel,
    out: *mut *mut McDataset,
) -> McStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let file = data_io::read_records(path_arg(path)?, format_of(format))?;
        let labels = model.file.labels();
        let normalization = model.file.normalization();
        let dataset = data_io::to_dataset(&file, &labels, &normalization)?;
        if let Some(d) = &model.file.training_digest {
            if *d != dataset_digest(&dataset) {
                return Err(Failure(
                    McStatus::InvalidArgument,
                    "data does not match the model's training data".into(),
                ));
            }
        }
        put(
            out,
            McDataset {
                loaded: Loaded {
                    dataset,
                    labels,
                    normalization,
                },
            },
        )
    })
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mc_dataset_num_classes(dataset: *const McDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.loaded.dataset.num_classes())
}

/// # Safety
/// `dataset` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mc_dataset_free(dataset: *mut McDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model on `dataset`. `hyper` may be null for defaults.
///
/// # Safety
/// Pointers must be null or valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mc_train(
    dataset: *const McDataset,
    hyper: *const McHyperparams,
    out: *mut *mut McModel,
) -> McStatus {
    guard(|| {
        let ds = &ref_arg(dataset, "dataset")?.loaded;
        let hyper: Hyperparams = hyper.as_ref().map_or_else(Hyperparams::default, |h| (*h).into());
        let outcome = train(&ds.dataset, hyper)?;
        let file = ModelFile::from_params(
            &outcome.params,
            &ds.labels,
            ds.normalization.value_scale,
            Some(dataset_digest(&ds.dataset)),
        )?;
        put(
            out,
            McModel {
                file,
                params: outcome.params,
            },
        )
    })
}

/// # Safety
/// `model` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn mc_model_save(model: *const McModel, path: *const c_char) -> McStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        Ok(data_io::save_model(path_arg(path)?, &model.file)?)
    })
}

/// # Safety
/// `path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mc_model_load(path: *const c_char, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        let file = data_io::load_model(path_arg(path)?)?;
        let params = file.params()?;
        put(out, McModel { file, params })
    })
}

/// # Safety
/// `model` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mc_model_free(model: *mut McModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mc_model_num_classes(model: *const McModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_classes())
}

/// Informative timestamps per class (`m`), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mc_model_num_timestamps(model: *const McModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.hyper.m)
}

/// Original label of class index `class`.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mc_model_label(model: *const McModel, class: usize, out: *mut i64) -> McStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = model.file.classes.get(class).ok_or(Error::UnknownClass(class))?.label;
        Ok(())
    })
}

/// Sorted informative timestamps of class index `class`, in original time
/// units, written to `out[0..len]`; `len` must be at least `m`.
///
/// # Safety
/// `model` must come from this library; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_model_timestamps(model: *const McModel, class: usize, out: *mut f64, len: usize) -> McStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let mut s: Vec<f64> = model.params.informative_timestamps(class)?.iter().copied().collect();
        s.sort_by(f64::total_cmp);
        if len < s.len() {
            return Err(Failure(McStatus::BufferTooSmall, format!("need {} slots, got {len}", s.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let ts = model.params.time_scale;
        for (i, v) in s.iter().enumerate() {
            *out.add(i) = ts.denormalize(*v);
        }
        Ok(())
    })
}

fn classifier<'a>(model: &'a McModel, train_data: &McDataset) -> Result<Classifier<'a>, Failure> {
    Ok(Classifier::new(&model.params, &train_data.loaded.dataset)?)
}

/// Classifies one series given in original units. Writes the predicted
/// original label to `label_out` and, if `distances_out` is not null, the
/// distance to every class (length `mc_model_num_classes`).
///
/// # Safety
/// Handles must come from this library; `t` and `y` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_classify(
    model: *const McModel,
    train_data: *const McDataset,
    t: *const f64,
    y: *const f64,
    n: usize,
    label_out: *mut i64,
    distances_out: *mut f64,
) -> McStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let train_data = ref_arg(train_data, "train_data")?;
        let label_out = label_out.as_mut().ok_or_else(|| null("label_out"))?;
        let norm = model.file.normalization();
        let t = normalize_timestamps(slice_arg(t, n, "t")?, norm.time_scale)?;
        let y = slice_arg(y, n, "y")?
            .iter()
            .map(|&v| norm.value_scale.to_standard(v))
            .collect();
        let series = TimeSeries::new(t, y)?;
        let out = classifier(model, train_data)?.classify(&series)?;
        *label_out = model.file.classes[out.label].label;
        if !distances_out.is_null() {
            for (k, d) in out.distances.iter().enumerate() {
                *distances_out.add(k) = *d * norm.value_scale.scale;
            }
        }
        Ok(())
    })
}

/// Predicted mean and variance of the class with original label `label` at
/// `n` timestamps in original units (up to 1.25x the training span past its
/// start). `variance_out` may be null.
///
/// # Safety
/// Handles must come from this library; arrays must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_forecast(
    model: *const McModel,
    train_data: *const McDataset,
    label: i64,
    t: *const f64,
    n: usize,
    mean_out: *mut f64,
    variance_out: *mut f64,
) -> McStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let train_data = ref_arg(train_data, "train_data")?;
        if mean_out.is_null() && n > 0 {
            return Err(null("mean_out"));
        }
        let class = model
            .file
            .labels()
            .class_of(label)
            .ok_or_else(|| Failure(McStatus::UnknownClass, format!("unknown label {label}")))?;
        let norm = model.file.normalization();
        let query: Vec<f64> = slice_arg(t, n, "t")?
            .iter()
            .map(|&v| norm.time_scale.normalize(v))
            .collect();
        let pred = motion_code::forecast(&model.params, &train_data.loaded.dataset, class, &query)?;
        let vs = norm.value_scale;
        for i in 0..n {
            *mean_out.add(i) = vs.to_original(pred.mean[i]);
            if !variance_out.is_null() {
                *variance_out.add(i) = pred.variance[i] * vs.scale * vs.scale;
            }
        }
        Ok(())
    })
}
