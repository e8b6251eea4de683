//! Loss terms and the composite objective.
//!
//! Per record, with `w = Pr(y | x)` from the global feature:
//!
//! ```text
//! sct:   L = (1 − w)·CE + w·(λ1·SubID + λ2·SubOOD + λ3·Ent)
//! none:  L = CE + λ1·SubID + λ2·SubOOD + λ3·Ent
//! ```
//!
//! `w` is a constant under differentiation. `SubID` sums the complement
//! ratio over ID-relevant regions, `SubOOD` the in-span ratio over
//! ID-irrelevant regions, and `Ent` is the negated entropy sum over the
//! ID-irrelevant regions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedstore::{ClassTable, EmbeddingRecord};
use crate::encoder::{SurrogateEncoder, TextFeatures};
use crate::error::{Error, Result};
use crate::regions::{cosine_logits, rank_of_true, RegionPartition, SoftmaxConfig};
use crate::subspace::{Projector, PromptMatrix};
use crate::vecops::{norm, softmax_with_log};

/// Probabilities below this are clamped inside the cross-entropy log.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Sct,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub modulation: Modulation,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.25,
            lambda2: 2.0,
            lambda3: 5.0,
            modulation: Modulation::Sct,
        }
    }
}

impl LossWeights {
    pub fn zero(modulation: Modulation) -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            modulation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Coefficients `(ce, regularizer)` for modulation weight `w`.
    pub fn coefficients(&self, w: f64) -> (f64, f64) {
        match self.modulation {
            Modulation::Sct => (1.0 - w, w),
            Modulation::None => (1.0, 1.0),
        }
    }

    pub fn combine(&self, ce: f64, ent: f64, sub_id: f64, sub_ood: f64, w: f64) -> f64 {
        let (a, b) = self.coefficients(w);
        a * ce + b * (self.lambda1 * sub_id + self.lambda2 * sub_ood + self.lambda3 * ent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ent: f64,
    pub sub_id: f64,
    pub sub_ood: f64,
    pub modulation_weight: f64,
    pub total: f64,
    /// Records whose cross-entropy hit [`CE_FLOOR`].
    pub clamp_events: usize,
}

impl LossBreakdown {
    /// `sub_id + sub_ood`.
    pub fn subspace(&self) -> f64 {
        self.sub_id + self.sub_ood
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.ce += other.ce;
        self.ent += other.ent;
        self.sub_id += other.sub_id;
        self.sub_ood += other.sub_ood;
        self.modulation_weight += other.modulation_weight;
        self.total += other.total;
        self.clamp_events += other.clamp_events;
    }

    fn scale(&mut self, s: f64) {
        self.ce *= s;
        self.ent *= s;
        self.sub_id *= s;
        self.sub_ood *= s;
        self.modulation_weight *= s;
        self.total *= s;
    }
}

/// `−log p_y`, with `p_y` floored at [`CE_FLOOR`]. The flag reports a clamp.
pub fn cross_entropy(p: &[f64], y: usize) -> (f64, bool) {
    let py = p[y];
    if py < CE_FLOOR {
        (-CE_FLOOR.ln(), true)
    } else {
        (-py.ln(), false)
    }
}

/// `−Σ_i H(p_i)` over the given probability vectors, with `0·log 0 = 0`.
pub fn entropy_reg<P: AsRef<[f64]>>(region_probs: &[P]) -> f64 {
    region_probs
        .iter()
        .map(|p| {
            p.as_ref()
                .iter()
                .filter(|&&pk| pk > 0.0)
                .map(|&pk| pk * pk.ln())
                .sum::<f64>()
        })
        .sum()
}

fn ratio_sum<'a>(
    prompts: &PromptMatrix,
    features: impl Iterator<Item = &'a [f64]>,
    parallel: bool,
) -> Result<f64> {
    let proj = Projector::new(prompts)?;
    let mut sum = 0.0;
    for f in features {
        let (par, orth) = proj.alignment_ratios(f)?;
        sum += if parallel { par } else { orth };
    }
    Ok(sum)
}

/// Sum over ID-relevant regions of `‖(I − P) f_i‖ / ‖f_i‖`.
pub fn sub_id_loss(prompts: &PromptMatrix, record: &EmbeddingRecord, partition: &RegionPartition) -> Result<f64> {
    ratio_sum(prompts, partition.relevant.iter().map(|&i| record.local(i)), false)
}

/// Sum over ID-irrelevant regions of `‖P f_i‖ / ‖f_i‖`.
pub fn sub_ood_loss(prompts: &PromptMatrix, record: &EmbeddingRecord, partition: &RegionPartition) -> Result<f64> {
    ratio_sum(prompts, partition.irrelevant.iter().map(|&i| record.local(i)), true)
}

/// Everything the objective needs besides the prompts and the data.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub encoder: &'a SurrogateEncoder,
    pub classes: &'a ClassTable,
    pub softmax: SoftmaxConfig,
    pub weights: LossWeights,
}

/// The discrete choices of one evaluation: region partition and modulation
/// weight. Gradients and finite differences hold these fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub partition: RegionPartition,
    pub weight: f64,
}

/// Gradient accumulators, one per loss term, all already scaled by their
/// coefficient in the objective.
pub(crate) struct GradParts {
    /// d/dW of the subspace terms (`D x M`).
    pub sub_id: DMatrix<f64>,
    pub sub_ood: DMatrix<f64>,
    /// d/dĝ_k of the probability terms (`K x D`).
    pub text_ce: DMatrix<f64>,
    pub text_ent: DMatrix<f64>,
}

impl GradParts {
    pub fn new(dim: usize, prompts: usize, classes: usize) -> Self {
        GradParts {
            sub_id: DMatrix::zeros(dim, prompts),
            sub_ood: DMatrix::zeros(dim, prompts),
            text_ce: DMatrix::zeros(classes, dim),
            text_ent: DMatrix::zeros(classes, dim),
        }
    }
}

/// Shared forward (and optionally backward) pass at fixed prompts.
pub(crate) struct Evaluator<'a> {
    pub ctx: LossContext<'a>,
    pub projector: Projector<'a>,
    pub text: TextFeatures,
}

impl<'a> Evaluator<'a> {
    pub fn new(prompts: &'a PromptMatrix, ctx: LossContext<'a>) -> Result<Self> {
        ctx.weights.validate()?;
        ctx.softmax.validate(ctx.classes.len())?;
        let text = ctx.encoder.encode_all(prompts, ctx.classes)?;
        let projector = Projector::new(prompts)?;
        Ok(Evaluator { ctx, projector, text })
    }

    fn check_record(&self, record: &EmbeddingRecord) -> Result<()> {
        if record.label >= self.text.len() {
            return Err(Error::Config(format!(
                "label {} out of range for K = {}",
                record.label,
                self.text.len()
            )));
        }
        if record.global.len() != self.text.dim() {
            return Err(Error::Dimension {
                expected: self.text.dim(),
                got: record.global.len(),
            });
        }
        if record.num_regions() == 0 {
            return Err(Error::Config("record has no local features".into()));
        }
        Ok(())
    }

    /// Partition and modulation weight at the current prompts.
    pub fn select(&self, record: &EmbeddingRecord) -> Result<Selection> {
        self.check_record(record)?;
        let tau = self.ctx.softmax.tau;
        let y = record.label;
        let (p, _) = softmax_with_log(&cosine_logits(&record.global, &self.text, tau)?);
        let mask = record
            .locals_iter()
            .map(|f| {
                let (pi, _) = softmax_with_log(&cosine_logits(f, &self.text, tau)?);
                Ok(rank_of_true(&pi, y) > self.ctx.softmax.rank_c)
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(Selection {
            partition: RegionPartition::from_mask(mask),
            weight: p[y],
        })
    }

    /// Loss of one record under a fixed selection. When `grad` is given, adds
    /// this record's gradient contributions scaled by `scale`.
    pub fn record(
        &self,
        record: &EmbeddingRecord,
        sel: &Selection,
        mut grad: Option<(&mut GradParts, f64)>,
    ) -> Result<LossBreakdown> {
        self.check_record(record)?;
        let tau = self.ctx.softmax.tau;
        let weights = self.ctx.weights;
        let y = record.label;
        let (ce_coef, reg_coef) = weights.coefficients(sel.weight);
        let text_trainable = self.ctx.encoder.is_trainable();

        // cross-entropy on the global feature
        let logits = cosine_logits(&record.global, &self.text, tau)?;
        let (p, logp) = softmax_with_log(&logits);
        let clamped = logp[y] < CE_FLOOR.ln();
        let ce = if clamped { -CE_FLOOR.ln() } else { -logp[y] };
        if let Some((g, s)) = grad.as_mut() {
            let c = *s * ce_coef;
            if text_trainable && c != 0.0 && !clamped {
                let fhat = unit_over_tau(&record.global, tau);
                for (k, &pk) in p.iter().enumerate() {
                    let dl = pk - if k == y { 1.0 } else { 0.0 };
                    add_row(&mut g.text_ce, k, c * dl, &fhat);
                }
            }
        }

        // negated entropy over ID-irrelevant regions
        let mut ent = 0.0;
        let ent_coef = grad.as_ref().map_or(0.0, |(_, s)| s * reg_coef * weights.lambda3);
        for &i in &sel.partition.irrelevant {
            let f = record.local(i);
            let (pi, logpi) = softmax_with_log(&cosine_logits(f, &self.text, tau)?);
            let neg_h: f64 = pi.iter().zip(&logpi).map(|(a, b)| a * b).sum();
            ent += neg_h;
            if let Some((g, _)) = grad.as_mut() {
                if text_trainable && ent_coef != 0.0 {
                    let fhat = unit_over_tau(f, tau);
                    for k in 0..pi.len() {
                        let dl = pi[k] * (logpi[k] - neg_h);
                        add_row(&mut g.text_ent, k, ent_coef * dl, &fhat);
                    }
                }
            }
        }

        // subspace ratios
        let sub_coef = grad.as_ref().map_or((0.0, 0.0), |(_, s)| {
            (s * reg_coef * weights.lambda1, s * reg_coef * weights.lambda2)
        });
        let mut sub_id = 0.0;
        for &i in &sel.partition.relevant {
            let target = grad.as_mut().map(|(g, _)| &mut g.sub_id);
            sub_id += self.ratio(record.local(i), false, target, sub_coef.0)?;
        }
        let mut sub_ood = 0.0;
        for &i in &sel.partition.irrelevant {
            let target = grad.as_mut().map(|(g, _)| &mut g.sub_ood);
            sub_ood += self.ratio(record.local(i), true, target, sub_coef.1)?;
        }

        let total = weights.combine(ce, ent, sub_id, sub_ood, sel.weight);
        for (term, v) in [("cross-entropy", ce), ("entropy", ent), ("sub-id", sub_id), ("sub-ood", sub_ood)] {
            if !v.is_finite() {
                return Err(Error::Numerical {
                    term,
                    detail: format!("loss value {v}"),
                });
            }
        }
        Ok(LossBreakdown {
            ce,
            ent,
            sub_id,
            sub_ood,
            modulation_weight: sel.weight,
            total,
            clamp_events: usize::from(clamped),
        })
    }

    /// One alignment ratio, optionally adding `coef · ∂ratio/∂W` to `grad`.
    ///
    /// With `z = S⁻¹Wᵀf`, `p = Wz`, `q = f − p` and a fixed vector `v`,
    /// `∂(vᵀp)/∂W = (v − W u) zᵀ + q uᵀ` where `u = S⁻¹Wᵀv`. The in-span ratio
    /// uses `v = p / ‖p‖`, the complement ratio `v = −q / ‖q‖`.
    fn ratio(&self, f: &[f64], parallel: bool, grad: Option<&mut DMatrix<f64>>, coef: f64) -> Result<f64> {
        let fnorm = norm(f);
        if fnorm == 0.0 {
            return Err(Error::ZeroFeature);
        }
        let w = self.projector.matrix();
        let fv = DVector::from_column_slice(f);
        let z = self.projector.solve(&w.tr_mul(&fv));
        let p = w * &z;
        let q = &fv - &p;
        let (part, sign) = if parallel { (&p, 1.0) } else { (&q, -1.0) };
        let part_norm = part.norm();
        let value = part_norm / fnorm;
        if let Some(g) = grad {
            if coef != 0.0 && part_norm > 0.0 {
                let v = part * (sign / part_norm);
                let u = self.projector.solve(&w.tr_mul(&v));
                let lead = &v - w * &u;
                let c = coef / fnorm;
                g.ger(c, &lead, &z, 1.0);
                g.ger(c, &q, &u, 1.0);
            }
        }
        Ok(value)
    }
}

fn unit_over_tau(f: &[f64], tau: f64) -> Vec<f64> {
    let s = 1.0 / (norm(f) * tau);
    f.iter().map(|x| x * s).collect()
}

fn add_row(m: &mut DMatrix<f64>, row: usize, c: f64, v: &[f64]) {
    for (j, &x) in v.iter().enumerate() {
        m[(row, j)] += c * x;
    }
}

pub fn composite_loss(record: &EmbeddingRecord, prompts: &PromptMatrix, ctx: LossContext<'_>) -> Result<LossBreakdown> {
    let eval = Evaluator::new(prompts, ctx)?;
    let sel = eval.select(record)?;
    eval.record(record, &sel, None)
}

/// Term-wise mean of per-record breakdowns. `clamp_events` is summed.
pub fn batch_loss<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
) -> Result<LossBreakdown> {
    let eval = Evaluator::new(prompts, ctx)?;
    let selections = records
        .iter()
        .map(|r| eval.select(r.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    batch_with(&eval, records, &selections)
}

pub(crate) fn batch_with<R: AsRef<EmbeddingRecord>>(
    eval: &Evaluator<'_>,
    records: &[R],
    selections: &[Selection],
) -> Result<LossBreakdown> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = LossBreakdown::default();
    for (r, sel) in records.iter().zip(selections) {
        acc.accumulate(&eval.record(r.as_ref(), sel, None)?);
    }
    acc.scale(1.0 / records.len() as f64);
    Ok(acc)
}

impl AsRef<EmbeddingRecord> for EmbeddingRecord {
    fn as_ref(&self) -> &EmbeddingRecord {
        self
    }
}
