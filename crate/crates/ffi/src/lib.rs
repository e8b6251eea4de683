//! C ABI for the sbcp engine.
//!
//! Conventions:
//! - every fallible function returns an [`SbcpStatus`]; on failure a message
//!   is available from [`sbcp_last_error`] on the same thread
//! - objects are opaque handles created by `*_open` / `*_load` / `*_train`
//!   and released with the matching `*_free`; freeing NULL is a no-op
//! - strings are NUL-terminated UTF-8 paths
//! - vectors are `double` arrays with an explicit length
//!
//! Panics never cross the boundary; they surface as `SBCP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use sbcp::embedstore::{read_class_features, read_dataset, ClassTable, Dataset};
use sbcp::encoder::{EncoderMode, SurrogateEncoder};
use sbcp::losses::Modulation;
use sbcp::metrics::{auroc, fpr_at_95_tpr, DetectionReport};
use sbcp::scoring::score_records;
use sbcp::scoring::Source;
use sbcp::subspace::{PromptMatrix, Projector};
use sbcp::trainer::{build_encoder, evaluate, load_checkpoint, save_checkpoint, train, CheckpointMeta, TrainConfig};
use sbcp::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbcpStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// Bad configuration or argument value, including non-UTF-8 paths.
    InvalidArgument = 2,
    Io = 3,
    /// Malformed or inconsistent `.sbcp`, checkpoint or metadata file.
    Format = 4,
    Dimension = 5,
    /// Singular Gram matrix or a zero-norm vector.
    Degenerate = 6,
    EmptyInput = 7,
    Numerical = 8,
    /// The caller's output buffer is too small.
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbcpModulation {
    Sct = 0,
    None = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbcpEncoder {
    Surrogate = 0,
    Frozen = 1,
}

/// Training hyperparameters. Fill with [`sbcp_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbcpTrainOptions {
    pub prompts: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// An [`SbcpModulation`] value.
    pub modulation: u32,
    pub tau: f64,
    pub rank_c: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Training images per class; 0 uses every record.
    pub shots: usize,
    /// An [`SbcpEncoder`] value.
    pub encoder: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SbcpReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub id_accuracy: f64,
    pub threshold_at_95tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl From<DetectionReport> for SbcpReport {
    fn from(r: DetectionReport) -> Self {
        SbcpReport {
            fpr95: r.fpr95,
            auroc: r.auroc,
            id_accuracy: r.id_accuracy,
            threshold_at_95tpr: r.threshold_at_95tpr,
            n_id: r.n_id,
            n_ood: r.n_ood,
        }
    }
}

/// An `.sbcp` file loaded into memory.
pub struct SbcpDataset {
    inner: Dataset,
}

/// Prompt matrix plus everything needed to score with it.
pub struct SbcpModel {
    prompts: PromptMatrix,
    encoder: SurrogateEncoder,
    meta: CheckpointMeta,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // interior NULs would truncate the message anyway
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> SbcpStatus {
    match e {
        Error::Config(_) => SbcpStatus::InvalidArgument,
        Error::Io { .. } => SbcpStatus::Io,
        Error::Schema(_) | Error::Format(_) | Error::Data(_) | Error::Serde(_) => SbcpStatus::Format,
        Error::Dimension { .. } => SbcpStatus::Dimension,
        Error::SingularGram { .. } | Error::ZeroFeature | Error::DegenerateTextFeature { .. } => {
            SbcpStatus::Degenerate
        }
        Error::EmptyBatch | Error::EmptySet(_) => SbcpStatus::EmptyInput,
        Error::Numerical { .. } => SbcpStatus::Numerical,
    }
}

/// Failure inside a call: a status plus its message.
struct Fail(SbcpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<Box<sbcp::trainer::TrainAbort>> for Fail {
    fn from(a: Box<sbcp::trainer::TrainAbort>) -> Self {
        Fail::from(a.error)
    }
}

fn null(what: &str) -> Fail {
    Fail(SbcpStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, catching panics and recording the error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SbcpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SbcpStatus::Ok
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
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SbcpStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SbcpStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn opt_path_arg(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        path_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call into the library on this
/// thread; do not free.
#[no_mangle]
pub extern "C" fn sbcp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sbcp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens an `.sbcp` dataset with at least one record.
///
/// # Safety
/// `path` must be NULL or a NUL-terminated string; `out` must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_dataset_open(path: *const c_char, out: *mut *mut SbcpDataset) -> SbcpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ds = read_dataset(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SbcpDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from [`sbcp_dataset_open`], freed once.
#[no_mangle]
pub unsafe extern "C" fn sbcp_dataset_free(ds: *mut SbcpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Writes D, K, N and the number of local regions per record. Any output
/// pointer may be NULL.
///
/// # Safety
/// `ds` must be a live dataset handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_dataset_shape(
    ds: *const SbcpDataset,
    dim: *mut usize,
    num_classes: *mut usize,
    num_records: *mut usize,
    num_regions: *mut usize,
) -> SbcpStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.inner;
        for (p, v) in [
            (dim, ds.dim()),
            (num_classes, ds.num_classes()),
            (num_records, ds.records.len()),
            (num_regions, ds.num_regions()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Default options for a label space of `num_classes`.
///
/// # Safety
/// `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_train_options_default(num_classes: usize, out: *mut SbcpTrainOptions) -> SbcpStatus {
    guard(|| {
        *out_arg(out, "out")? = options_from(&TrainConfig::new(num_classes));
        Ok(())
    })
}

fn options_from(c: &TrainConfig) -> SbcpTrainOptions {
    SbcpTrainOptions {
        prompts: c.prompts,
        lr: c.lr,
        batch_size: c.batch_size,
        epochs: c.epochs,
        weight_decay: c.weight_decay,
        lambda1: c.weights.lambda1,
        lambda2: c.weights.lambda2,
        lambda3: c.weights.lambda3,
        modulation: match c.weights.modulation {
            Modulation::Sct => SbcpModulation::Sct,
            Modulation::None => SbcpModulation::None,
        } as u32,
        tau: c.softmax.tau,
        rank_c: c.softmax.rank_c,
        epsilon: c.epsilon,
        seed: c.seed,
        shots: c.shots.unwrap_or(0),
        encoder: match c.encoder {
            EncoderMode::SurrogateLinear => SbcpEncoder::Surrogate,
            EncoderMode::Frozen => SbcpEncoder::Frozen,
        } as u32,
    }
}

fn config_from(o: &SbcpTrainOptions, num_classes: usize) -> Result<TrainConfig, Fail> {
    let mut c = TrainConfig::new(num_classes);
    c.prompts = o.prompts;
    c.lr = o.lr;
    c.batch_size = o.batch_size;
    c.epochs = o.epochs;
    c.weight_decay = o.weight_decay;
    c.weights.lambda1 = o.lambda1;
    c.weights.lambda2 = o.lambda2;
    c.weights.lambda3 = o.lambda3;
    c.weights.modulation = match o.modulation {
        m if m == SbcpModulation::Sct as u32 => Modulation::Sct,
        m if m == SbcpModulation::None as u32 => Modulation::None,
        m => return Err(Fail(SbcpStatus::InvalidArgument, format!("unknown modulation {m}"))),
    };
    c.softmax.tau = o.tau;
    c.softmax.rank_c = o.rank_c;
    c.epsilon = o.epsilon;
    c.seed = o.seed;
    c.shots = (o.shots > 0).then_some(o.shots);
    c.encoder = match o.encoder {
        e if e == SbcpEncoder::Surrogate as u32 => EncoderMode::SurrogateLinear,
        e if e == SbcpEncoder::Frozen as u32 => EncoderMode::Frozen,
        e => return Err(Fail(SbcpStatus::InvalidArgument, format!("unknown encoder {e}"))),
    };
    Ok(c)
}

fn load_frozen(path: Option<&Path>) -> Result<Option<ClassTable>, Fail> {
    Ok(path.map(read_class_features).transpose()?)
}

/// Trains a prompt matrix on `train_set`. `options` may be NULL for defaults.
/// `frozen_text` is the class text-feature file, required when
/// `options->encoder` is `SBCP_ENCODER_FROZEN`, otherwise ignored.
///
/// # Safety
/// Pointers must be NULL or valid for their types; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_train(
    train_set: *const SbcpDataset,
    options: *const SbcpTrainOptions,
    frozen_text: *const c_char,
    out: *mut *mut SbcpModel,
) -> SbcpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ds = &ref_arg(train_set, "train_set")?.inner;
        let config = match options.as_ref() {
            Some(o) => config_from(o, ds.num_classes())?,
            None => TrainConfig::new(ds.num_classes()),
        };
        let frozen_path = match config.encoder {
            EncoderMode::Frozen => opt_path_arg(frozen_text, "frozen_text")?,
            EncoderMode::SurrogateLinear => None,
        };
        let frozen = load_frozen(frozen_path.as_deref())?;
        config.validate(ds.dim(), ds.num_classes())?;
        let encoder = build_encoder(&config, ds.dim(), frozen.as_ref())?;
        let state = train(ds, &config, &encoder)?;
        let meta = CheckpointMeta {
            dim: ds.dim(),
            num_classes: ds.num_classes(),
            frozen_text: frozen_path,
            epochs_completed: state.epoch,
            config,
        };
        *out = Box::into_raw(Box::new(SbcpModel {
            prompts: state.prompts,
            encoder,
            meta,
        }));
        Ok(())
    })
}

/// Loads a checkpoint and its `.json` sidecar. `frozen_text` overrides the
/// text-feature path recorded in the sidecar; pass NULL to keep it.
///
/// # Safety
/// Pointers must be NULL or valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_load(
    checkpoint: *const c_char,
    frozen_text: *const c_char,
    out: *mut *mut SbcpModel,
) -> SbcpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (prompts, mut meta) = load_checkpoint(&path_arg(checkpoint, "checkpoint")?)?;
        if let Some(p) = opt_path_arg(frozen_text, "frozen_text")? {
            meta.frozen_text = Some(p);
        }
        let frozen = match meta.config.encoder {
            EncoderMode::Frozen => load_frozen(meta.frozen_text.as_deref())?,
            EncoderMode::SurrogateLinear => None,
        };
        let encoder = build_encoder(&meta.config, meta.dim, frozen.as_ref())?;
        *out = Box::into_raw(Box::new(SbcpModel { prompts, encoder, meta }));
        Ok(())
    })
}

/// Writes the checkpoint and its `.json` sidecar.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_save(model: *const SbcpModel, path: *const c_char) -> SbcpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        save_checkpoint(&path_arg(path, "path")?, &m.prompts, &m.meta)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_free(model: *mut SbcpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes D and M. Either output may be NULL.
///
/// # Safety
/// `model` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_shape(model: *const SbcpModel, dim: *mut usize, prompts: *mut usize) -> SbcpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if let Some(d) = dim.as_mut() {
            *d = m.prompts.dim();
        }
        if let Some(p) = prompts.as_mut() {
            *p = m.prompts.num_prompts();
        }
        Ok(())
    })
}

/// Copies `W` row-major into `out` (`len >= D*M`).
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_prompts(model: *const SbcpModel, out: *mut f64, len: usize) -> SbcpStatus {
    guard(|| {
        let w = ref_arg(model, "model")?.prompts.matrix();
        let (d, m) = w.shape();
        if len < d * m {
            return Err(Fail(SbcpStatus::BufferTooSmall, format!("need {} doubles, got {len}", d * m)));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let out = std::slice::from_raw_parts_mut(out, d * m);
        for i in 0..d {
            for j in 0..m {
                out[i * m + j] = w[(i, j)];
            }
        }
        Ok(())
    })
}

/// Fractions of `f` inside and outside the prompt subspace:
/// `‖P f‖ / ‖f‖` and `‖(I - P) f‖ / ‖f‖`.
///
/// # Safety
/// `model` must be a live handle; `feature` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_alignment(
    model: *const SbcpModel,
    feature: *const f64,
    len: usize,
    parallel: *mut f64,
    orthogonal: *mut f64,
) -> SbcpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let f = slice_arg(feature, len, "feature")?;
        if len != m.prompts.dim() {
            return Err(Error::Dimension {
                expected: m.prompts.dim(),
                got: len,
            }
            .into());
        }
        let (par, orth) = Projector::new(&m.prompts)?.alignment_ratios(f)?;
        *out_arg(parallel, "parallel")? = par;
        *out_arg(orthogonal, "orthogonal")? = orth;
        Ok(())
    })
}

fn check_compatible(m: &SbcpModel, ds: &Dataset) -> Result<(), Fail> {
    if ds.dim() != m.meta.dim {
        return Err(Error::Dimension {
            expected: m.meta.dim,
            got: ds.dim(),
        }
        .into());
    }
    if ds.num_classes() != m.meta.num_classes {
        return Err(Error::Schema(format!(
            "dataset has K = {} but the model was trained with K = {}",
            ds.num_classes(),
            m.meta.num_classes
        ))
        .into());
    }
    Ok(())
}

/// GL-MCM score and predicted class for every record of `ds`, using its
/// class table. `scores` and `predictions` may be NULL; non-NULL buffers
/// must hold `len >= N` entries. `tau <= 0` uses the model's temperature.
///
/// # Safety
/// Handles must be live; non-NULL buffers must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_score(
    model: *const SbcpModel,
    ds: *const SbcpDataset,
    tau: f64,
    scores: *mut f64,
    predictions: *mut usize,
    len: usize,
) -> SbcpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = &ref_arg(ds, "dataset")?.inner;
        check_compatible(m, ds)?;
        let n = ds.records.len();
        if len < n {
            return Err(Fail(SbcpStatus::BufferTooSmall, format!("need {n} entries, got {len}")));
        }
        if ds.num_regions() == 0 {
            return Err(Error::Config("GL-MCM scoring needs local features".into()).into());
        }
        let tau = if tau > 0.0 { tau } else { m.meta.config.softmax.tau };
        let text = m.encoder.encode_all(&m.prompts, &ds.classes)?;
        let samples = score_records(&ds.records, Source::Id, &text, tau)?;
        if !scores.is_null() {
            let out = std::slice::from_raw_parts_mut(scores, n);
            for (o, s) in out.iter_mut().zip(&samples) {
                *o = s.score;
            }
        }
        if !predictions.is_null() {
            let out = std::slice::from_raw_parts_mut(predictions, n);
            for (o, s) in out.iter_mut().zip(&samples) {
                *o = s.predicted_class;
            }
        }
        Ok(())
    })
}

/// FPR95, AUROC and ID accuracy on an ID / OOD pair. Class embeddings come
/// from `id_test`. `tau <= 0` uses the model's temperature.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_model_evaluate(
    model: *const SbcpModel,
    id_test: *const SbcpDataset,
    ood_test: *const SbcpDataset,
    tau: f64,
    out: *mut SbcpReport,
) -> SbcpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let id = &ref_arg(id_test, "id_test")?.inner;
        let ood = &ref_arg(ood_test, "ood_test")?.inner;
        let out = out_arg(out, "out")?;
        check_compatible(m, id)?;
        if ood.dim() != m.meta.dim {
            return Err(Error::Dimension {
                expected: m.meta.dim,
                got: ood.dim(),
            }
            .into());
        }
        let mut softmax = m.meta.config.softmax;
        if tau > 0.0 {
            softmax.tau = tau;
        }
        *out = evaluate(&m.prompts, &m.encoder, &id.classes, id, ood, &softmax)?.into();
        Ok(())
    })
}

/// Mann-Whitney AUROC, ID as the positive class, ties counted half.
///
/// # Safety
/// Arrays must hold their stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_auroc(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> SbcpStatus {
    guard(|| {
        let id = slice_arg(id_scores, n_id, "id_scores")?;
        let ood = slice_arg(ood_scores, n_ood, "ood_scores")?;
        *out_arg(out, "out")? = auroc(id, ood)?;
        Ok(())
    })
}

/// FPR on OOD at the threshold keeping 95% of ID scores; also writes that
/// threshold to `threshold` unless it is NULL.
///
/// # Safety
/// Arrays must hold their stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbcp_fpr95(
    id_scores: *const f64,
    n_id: usize,
    ood_scores: *const f64,
    n_ood: usize,
    out: *mut f64,
    threshold: *mut f64,
) -> SbcpStatus {
    guard(|| {
        let id = slice_arg(id_scores, n_id, "id_scores")?;
        let ood = slice_arg(ood_scores, n_ood, "ood_scores")?;
        let out = out_arg(out, "out")?;
        let (fpr, eta) = fpr_at_95_tpr(id, ood)?;
        *out = fpr;
        if let Some(t) = threshold.as_mut() {
            *t = eta;
        }
        Ok(())
    })
}
