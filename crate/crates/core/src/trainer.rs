//! Few-shot training of the prompt matrix with plain SGD and weight decay.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedstore::{sidecar_path, ClassTable, Dataset, EmbeddingRecord};
use crate::encoder::{EncoderMode, SurrogateEncoder};
use crate::error::{Error, Result};
use crate::grad::loss_and_grad;
use crate::losses::{LossBreakdown, LossContext, LossWeights};
use crate::metrics::{id_accuracy, DetectionReport};
use crate::regions::SoftmaxConfig;
use crate::scoring::{score_records, ScoredSample, Source};
use crate::seeding;
use crate::subspace::{PromptMatrix, DEFAULT_EPSILON};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prompts: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub softmax: SoftmaxConfig,
    pub epsilon: f64,
    pub seed: u64,
    /// Training images per class; `None` uses every record.
    pub shots: Option<usize>,
    pub encoder: EncoderMode,
}

impl TrainConfig {
    /// Defaults for a label space of `num_classes`.
    pub fn new(num_classes: usize) -> Self {
        TrainConfig {
            prompts: 16,
            lr: 0.002,
            batch_size: 32,
            epochs: 25,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            softmax: SoftmaxConfig::for_classes(num_classes),
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            shots: None,
            encoder: EncoderMode::SurrogateLinear,
        }
    }

    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be >= 1".into());
        }
        if self.prompts == 0 || self.prompts >= dim {
            return bad(format!("prompt count M = {} must satisfy 1 <= M < D = {dim}", self.prompts));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.shots == Some(0) {
            return bad("shots must be >= 1".into());
        }
        self.weights.validate()?;
        self.softmax.validate(num_classes)
    }
}

/// `D x M` prompts with i.i.d. `N(0, 0.02²)` entries.
pub fn init_prompts(dim: usize, prompts: usize, seed: u64, epsilon: f64) -> Result<PromptMatrix> {
    if prompts >= dim {
        return Err(Error::Config(format!("prompt count M = {prompts} must be < D = {dim}")));
    }
    let mut rng = seeding::rng(seed, seeding::PROMPT_INIT);
    let w = DMatrix::from_fn(dim, prompts, |_, _| INIT_STD * rng.sample::<f64, _>(StandardNormal));
    PromptMatrix::new(w, epsilon)
}

pub fn build_encoder(config: &TrainConfig, dim: usize, frozen: Option<&ClassTable>) -> Result<SurrogateEncoder> {
    match (config.encoder, frozen) {
        (EncoderMode::SurrogateLinear, _) => Ok(SurrogateEncoder::surrogate_linear(dim, config.seed)),
        (EncoderMode::Frozen, Some(features)) => {
            if features.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: features.dim(),
                });
            }
            SurrogateEncoder::frozen(features)
        }
        (EncoderMode::Frozen, None) => Err(Error::Config("frozen encoder needs text features".into())),
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub prompts: PromptMatrix,
    pub epoch: usize,
    pub steps: usize,
    /// Record-weighted mean breakdown of each completed epoch.
    pub loss_history: Vec<LossBreakdown>,
    pub rng: ChaCha8Rng,
}

/// Training stopped early; `last_good` holds the state before the failing step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Option<TrainState>,
}

impl From<Box<TrainAbort>> for Error {
    fn from(a: Box<TrainAbort>) -> Self {
        a.error
    }
}

fn abort(error: Error, last_good: Option<TrainState>) -> Box<TrainAbort> {
    Box::new(TrainAbort { error, last_good })
}

/// The first `shots` records of each class, in file order.
pub fn select_shots(dataset: &Dataset, shots: Option<usize>) -> Result<Vec<&EmbeddingRecord>> {
    let Some(shots) = shots else {
        return Ok(dataset.records.iter().collect());
    };
    let k = dataset.num_classes();
    if shots * k > dataset.records.len() {
        return Err(Error::Config(format!(
            "{shots} shots x {k} classes exceeds {} records",
            dataset.records.len()
        )));
    }
    let mut taken = vec![0usize; k];
    let picked: Vec<&EmbeddingRecord> = dataset
        .records
        .iter()
        .filter(|r| {
            let keep = taken[r.label] < shots;
            taken[r.label] += usize::from(keep);
            keep
        })
        .collect();
    if let Some(c) = taken.iter().position(|&n| n < shots) {
        return Err(Error::Config(format!("class {c} has only {} records, {shots} shots requested", taken[c])));
    }
    Ok(picked)
}

pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    encoder: &SurrogateEncoder,
) -> std::result::Result<TrainState, Box<TrainAbort>> {
    let prompts = init_prompts(dataset.dim(), config.prompts, config.seed, config.epsilon).map_err(|e| abort(e, None))?;
    train_from(dataset, config, encoder, prompts)
}

/// Runs SGD starting from the given prompts.
pub fn train_from(
    dataset: &Dataset,
    config: &TrainConfig,
    encoder: &SurrogateEncoder,
    prompts: PromptMatrix,
) -> std::result::Result<TrainState, Box<TrainAbort>> {
    let setup = || -> Result<Vec<&EmbeddingRecord>> {
        config.validate(dataset.dim(), dataset.num_classes())?;
        if dataset.num_regions() == 0 {
            return Err(Error::Config("training needs local features".into()));
        }
        select_shots(dataset, config.shots)
    };
    let records = setup().map_err(|e| abort(e, None))?;
    let ctx = LossContext {
        encoder,
        classes: &dataset.classes,
        softmax: config.softmax,
        weights: config.weights,
    };

    let mut state = TrainState {
        prompts,
        epoch: 0,
        steps: 0,
        loss_history: Vec::with_capacity(config.epochs),
        rng: seeding::rng(config.seed, seeding::SHUFFLE),
    };
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut epoch_sum = LossBreakdown::default();
        let mut next = state.prompts.clone();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| records[i]).collect();
            let step = loss_and_grad(&batch, &next, ctx).and_then(|g| {
                if g.value.is_finite() {
                    Ok(g)
                } else {
                    Err(Error::Numerical {
                        term: "total loss",
                        detail: format!("value {}", g.value),
                    })
                }
            });
            let g = match step {
                Ok(g) => g,
                Err(e) => return Err(abort(e, Some(state))),
            };
            let n = batch.len() as f64;
            let b = &g.breakdown;
            epoch_sum.ce += b.ce * n;
            epoch_sum.ent += b.ent * n;
            epoch_sum.sub_id += b.sub_id * n;
            epoch_sum.sub_ood += b.sub_ood * n;
            epoch_sum.modulation_weight += b.modulation_weight * n;
            epoch_sum.total += b.total * n;
            epoch_sum.clamp_events += b.clamp_events;

            let (lr, wd) = (config.lr, config.weight_decay);
            next.matrix_mut()
                .zip_apply(&g.grad, |w, gw| *w -= lr * (gw + wd * *w));
            if next.matrix().iter().any(|x| !x.is_finite()) {
                let e = Error::Numerical {
                    term: "prompt update",
                    detail: format!("non-finite prompt entry at step {}", state.steps),
                };
                return Err(abort(e, Some(state)));
            }
            state.steps += 1;
        }
        state.prompts = next;
        let n = records.len() as f64;
        epoch_sum.ce /= n;
        epoch_sum.ent /= n;
        epoch_sum.sub_id /= n;
        epoch_sum.sub_ood /= n;
        epoch_sum.modulation_weight /= n;
        epoch_sum.total /= n;
        state.loss_history.push(epoch_sum);
        state.epoch += 1;
    }
    Ok(state)
}

/// Scores both test sets with GL-MCM.
pub fn score_datasets(
    prompts: &PromptMatrix,
    encoder: &SurrogateEncoder,
    classes: &ClassTable,
    id_test: &Dataset,
    ood_test: &Dataset,
    softmax: &SoftmaxConfig,
) -> Result<(Vec<ScoredSample>, Vec<ScoredSample>)> {
    let text = encoder.encode_all(prompts, classes)?;
    for ds in [id_test, ood_test] {
        if ds.num_regions() == 0 {
            return Err(Error::Config("GL-MCM scoring needs local features".into()));
        }
    }
    Ok((
        score_records(&id_test.records, Source::Id, &text, softmax.tau)?,
        score_records(&ood_test.records, Source::Ood, &text, softmax.tau)?,
    ))
}

pub fn evaluate(
    prompts: &PromptMatrix,
    encoder: &SurrogateEncoder,
    classes: &ClassTable,
    id_test: &Dataset,
    ood_test: &Dataset,
    softmax: &SoftmaxConfig,
) -> Result<DetectionReport> {
    let (id, ood) = score_datasets(prompts, encoder, classes, id_test, ood_test, softmax)?;
    report_from_samples(&id, &ood, &id_test.records)
}

pub fn report_from_samples(
    id: &[ScoredSample],
    ood: &[ScoredSample],
    id_records: &[EmbeddingRecord],
) -> Result<DetectionReport> {
    let id_scores: Vec<f64> = id.iter().map(|s| s.score).collect();
    let ood_scores: Vec<f64> = ood.iter().map(|s| s.score).collect();
    let preds: Vec<usize> = id.iter().map(|s| s.predicted_class).collect();
    let labels: Vec<usize> = id_records.iter().map(|r| r.label).collect();
    DetectionReport::from_scores(&id_scores, &ood_scores, id_accuracy(&preds, &labels)?)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SBCW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar metadata stored as `<checkpoint>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub dim: usize,
    pub num_classes: usize,
    pub frozen_text: Option<PathBuf>,
    pub epochs_completed: usize,
}

/// Writes `W` as: magic `SBCW`, `u32` version, `u32` D, `u32` M, then
/// `D x M` little-endian `f32`, row-major. Metadata goes to the sidecar.
pub fn save_checkpoint(path: &Path, prompts: &PromptMatrix, meta: &CheckpointMeta) -> Result<()> {
    let (d, m) = (prompts.dim(), prompts.num_prompts());
    let mut buf = Vec::with_capacity(16 + 4 * d * m);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [CHECKPOINT_VERSION, d as u32, m as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..d {
        for j in 0..m {
            buf.extend_from_slice(&(prompts.matrix()[(i, j)] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path, "json");
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(PromptMatrix, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path, "json");
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a prompt checkpoint".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (version, d, m) = (word(1), word(2), word(3));
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if Some(bytes.len()) != d.checked_mul(m).and_then(|n| n.checked_mul(4)).map(|n| n + 16) {
        return Err(Error::Format("checkpoint length disagrees with its header".into()));
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let prompts = PromptMatrix::new(DMatrix::from_row_slice(d, m, &vals), meta.config.epsilon)?;
    Ok((prompts, meta))
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    ce: f64,
    ent: f64,
    sub_id: f64,
    sub_ood: f64,
    total: f64,
}

/// CSV with columns `epoch,ce,ent,sub_id,sub_ood,total`; epochs are 1-based.
pub fn write_loss_history(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, b) in history.iter().enumerate() {
        w.serialize(HistoryRow {
            epoch: i + 1,
            ce: b.ce,
            ent: b.ent,
            sub_id: b.sub_id,
            sub_ood: b.sub_ood,
            total: b.total,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
