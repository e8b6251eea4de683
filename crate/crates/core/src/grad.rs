//! Exact gradient of the batch objective with respect to the prompt matrix,
//! and a central-difference checker.
//!
//! The region partition and the modulation weight are piecewise-constant
//! selections: both the analytic gradient and the finite-difference oracle
//! hold them at their base-point values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingRecord;
use crate::encoder::{SurrogateEncoder, TextFeatures};
use crate::error::{Error, Result};
use crate::losses::{batch_with, Evaluator, GradParts, LossBreakdown, LossContext, LossWeights, Selection};
use crate::subspace::PromptMatrix;

/// Denominator floor for per-entry relative error, so entries whose true
/// derivative is zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub value: f64,
    pub breakdown: LossBreakdown,
    pub grad: DMatrix<f64>,
    pub clamp_events: usize,
}

/// Per-term gradients, each already weighted as in the objective.
#[derive(Debug, Clone)]
pub struct TermGradients {
    pub ce: DMatrix<f64>,
    pub ent: DMatrix<f64>,
    pub sub_id: DMatrix<f64>,
    pub sub_ood: DMatrix<f64>,
}

/// Loss and gradient with selections taken at `prompts`.
pub fn loss_and_grad<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
) -> Result<GradientResult> {
    let selections = selections(records, prompts, ctx)?;
    loss_and_grad_with(records, prompts, ctx, &selections)
}

/// Per-record selections (partition + modulation weight) at `prompts`.
pub fn selections<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
) -> Result<Vec<Selection>> {
    let eval = Evaluator::new(prompts, ctx)?;
    records.iter().map(|r| eval.select(r.as_ref())).collect()
}

/// Batch loss under fixed selections.
pub fn loss_with<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
    selections: &[Selection],
) -> Result<LossBreakdown> {
    let eval = Evaluator::new(prompts, ctx)?;
    check_lengths(records.len(), selections.len())?;
    batch_with(&eval, records, selections)
}

fn check_lengths(records: usize, selections: usize) -> Result<()> {
    if records == 0 {
        return Err(Error::EmptyBatch);
    }
    if records != selections {
        return Err(Error::Dimension {
            expected: records,
            got: selections,
        });
    }
    Ok(())
}

pub fn loss_and_grad_with<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
    selections: &[Selection],
) -> Result<GradientResult> {
    let (breakdown, terms) = terms_with(records, prompts, ctx, selections)?;
    let grad = terms.ce + terms.ent + terms.sub_id + terms.sub_ood;
    Ok(GradientResult {
        value: breakdown.total,
        clamp_events: breakdown.clamp_events,
        breakdown,
        grad,
    })
}

/// Loss plus the gradient split by loss term.
pub fn term_gradients<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
) -> Result<(LossBreakdown, TermGradients)> {
    let selections = selections(records, prompts, ctx)?;
    terms_with(records, prompts, ctx, &selections)
}

fn terms_with<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
    selections: &[Selection],
) -> Result<(LossBreakdown, TermGradients)> {
    check_lengths(records.len(), selections.len())?;
    let eval = Evaluator::new(prompts, ctx)?;
    let n = records.len();
    let scale = 1.0 / n as f64;
    let mut parts = GradParts::new(prompts.dim(), prompts.num_prompts(), ctx.classes.len());

    let mut sum = LossBreakdown::default();
    for (r, sel) in records.iter().zip(selections) {
        let b = eval.record(r.as_ref(), sel, Some((&mut parts, scale)))?;
        sum.ce += b.ce;
        sum.ent += b.ent;
        sum.sub_id += b.sub_id;
        sum.sub_ood += b.sub_ood;
        sum.modulation_weight += b.modulation_weight;
        sum.total += b.total;
        sum.clamp_events += b.clamp_events;
    }
    // same accumulation order and final scaling as `batch_loss`
    let breakdown = LossBreakdown {
        ce: sum.ce * scale,
        ent: sum.ent * scale,
        sub_id: sum.sub_id * scale,
        sub_ood: sum.sub_ood * scale,
        modulation_weight: sum.modulation_weight * scale,
        total: sum.total * scale,
        clamp_events: sum.clamp_events,
    };

    let terms = TermGradients {
        ce: text_backward(ctx.encoder, prompts, &eval.text, &parts.text_ce)?,
        ent: text_backward(ctx.encoder, prompts, &eval.text, &parts.text_ent)?,
        sub_id: parts.sub_id,
        sub_ood: parts.sub_ood,
    };
    for (term, g) in [
        ("cross-entropy", &terms.ce),
        ("entropy", &terms.ent),
        ("sub-id", &terms.sub_id),
        ("sub-ood", &terms.sub_ood),
    ] {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                term,
                detail: "non-finite gradient".into(),
            });
        }
    }
    Ok((breakdown, terms))
}

/// Pulls `∂L/∂ĝ_k` (rows of `text_grad`) back to `∂L/∂W`.
///
/// `ĝ_k = h_k / ‖h_k‖`, `h_k = c_k + A·s`, `s = W·1/M`, so
/// `∂L/∂h_k = (I − ĝ_k ĝ_kᵀ) ∂L/∂ĝ_k / ‖h_k‖` and every column of `∂L/∂W`
/// equals `Aᵀ Σ_k ∂L/∂h_k / M`.
fn text_backward(
    encoder: &SurrogateEncoder,
    prompts: &PromptMatrix,
    text: &TextFeatures,
    text_grad: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (d, m) = (prompts.dim(), prompts.num_prompts());
    let Some(mix) = encoder.mix() else {
        return Ok(DMatrix::zeros(d, m));
    };
    let mut dh_sum = DVector::<f64>::zeros(d);
    for k in 0..text.len() {
        let g = DVector::from_column_slice(text.row(k));
        let dg = text_grad.row(k).transpose();
        let radial = g.dot(&dg);
        dh_sum += (dg - g * radial) / text.raw_norm(k);
    }
    let ds = mix.tr_mul(&dh_sum) / m as f64;
    Ok(DMatrix::from_fn(d, m, |i, _| ds[i]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `D x M`, row-major.
    pub per_entry_errors: Vec<f64>,
    pub step: f64,
    pub rows: usize,
    pub cols: usize,
}

impl FiniteDiffReport {
    pub fn error(&self, i: usize, j: usize) -> f64 {
        self.per_entry_errors[i * self.cols + j]
    }
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`, and 0 when both are zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Which part of the objective a finite-difference check targets. Single
/// terms carry their objective weights (λ and modulation coefficient).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    Total,
    CrossEntropy,
    Entropy,
    SubId,
    SubOod,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::CrossEntropy,
        LossTerm::Entropy,
        LossTerm::SubId,
        LossTerm::SubOod,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Total => "total",
            LossTerm::CrossEntropy => "cross-entropy",
            LossTerm::Entropy => "entropy",
            LossTerm::SubId => "sub-id",
            LossTerm::SubOod => "sub-ood",
        }
    }

    fn weighted(self, weights: &LossWeights, b: &LossBreakdown) -> f64 {
        let (a, r) = weights.coefficients(b.modulation_weight);
        match self {
            LossTerm::Total => b.total,
            LossTerm::CrossEntropy => a * b.ce,
            LossTerm::Entropy => r * weights.lambda3 * b.ent,
            LossTerm::SubId => r * weights.lambda1 * b.sub_id,
            LossTerm::SubOod => r * weights.lambda2 * b.sub_ood,
        }
    }

    fn pick(self, terms: TermGradients) -> DMatrix<f64> {
        match self {
            LossTerm::Total => terms.ce + terms.ent + terms.sub_id + terms.sub_ood,
            LossTerm::CrossEntropy => terms.ce,
            LossTerm::Entropy => terms.ent,
            LossTerm::SubId => terms.sub_id,
            LossTerm::SubOod => terms.sub_ood,
        }
    }
}

/// Batch-mean value of one (weighted) term under fixed selections.
pub fn term_value_with<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
    selections: &[Selection],
    term: LossTerm,
) -> Result<f64> {
    check_lengths(records.len(), selections.len())?;
    let eval = Evaluator::new(prompts, ctx)?;
    let mut sum = 0.0;
    for (r, sel) in records.iter().zip(selections) {
        sum += term.weighted(&ctx.weights, &eval.record(r.as_ref(), sel, None)?);
    }
    Ok(sum * (1.0 / records.len() as f64))
}

/// Compares the analytic gradient with central differences of step `h`
/// at every entry of `W`.
pub fn finite_diff_check<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
    h: f64,
) -> Result<FiniteDiffReport> {
    finite_diff_check_term(records, prompts, ctx, h, LossTerm::Total)
}

pub fn finite_diff_check_term<R: AsRef<EmbeddingRecord>>(
    records: &[R],
    prompts: &PromptMatrix,
    ctx: LossContext<'_>,
    h: f64,
    term: LossTerm,
) -> Result<FiniteDiffReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let selections = selections(records, prompts, ctx)?;
    let analytic = term.pick(terms_with(records, prompts, ctx, &selections)?.1);
    let (d, m) = (prompts.dim(), prompts.num_prompts());
    let mut errors = vec![0.0; d * m];
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut shifted = prompts.clone();
    for i in 0..d {
        for j in 0..m {
            let base = prompts.matrix()[(i, j)];
            shifted.matrix_mut()[(i, j)] = base + h;
            let plus = term_value_with(records, &shifted, ctx, &selections, term)?;
            shifted.matrix_mut()[(i, j)] = base - h;
            let minus = term_value_with(records, &shifted, ctx, &selections, term)?;
            shifted.matrix_mut()[(i, j)] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[(i, j)];
            let rel = relative_error(a, numeric);
            errors[i * m + j] = rel;
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    Ok(FiniteDiffReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        per_entry_errors: errors,
        step: h,
        rows: d,
        cols: m,
    })
}
