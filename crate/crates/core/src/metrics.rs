//! OOD evaluation metrics. ID samples are the positive class and higher
//! scores mean "more ID".

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target true-positive rate for FPR95, as an exact fraction.
const TPR_NUM: usize = 95;
const TPR_DEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub id_accuracy: f64,
    pub threshold_at_95tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl DetectionReport {
    pub fn from_scores(id_scores: &[f64], ood_scores: &[f64], id_accuracy: f64) -> Result<Self> {
        let (fpr95, eta) = fpr_at_95_tpr(id_scores, ood_scores)?;
        Ok(DetectionReport {
            fpr95,
            auroc: auroc(id_scores, ood_scores)?,
            id_accuracy,
            threshold_at_95tpr: eta,
            n_id: id_scores.len(),
            n_ood: ood_scores.len(),
        })
    }
}

impl fmt::Display for DetectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>10} {:>10} {:>12} {:>7} {:>7}", "FPR95↓", "AUROC↑", "ID-Acc↑", "eta@95TPR", "n_id", "n_ood")?;
        write!(
            f,
            "{:>10.2} {:>10.2} {:>10.2} {:>12.6} {:>7} {:>7}",
            100.0 * self.fpr95,
            100.0 * self.auroc,
            100.0 * self.id_accuracy,
            self.threshold_at_95tpr,
            self.n_id,
            self.n_ood
        )
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn non_empty(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::EmptySet(what))
    } else {
        Ok(())
    }
}

/// FPR on OOD at the largest threshold `η` (an observed ID score) that keeps
/// at least 95% of ID scores `>= η`. No interpolation. Returns `(fpr, η)`.
pub fn fpr_at_95_tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<(f64, f64)> {
    non_empty(id_scores, "ID")?;
    non_empty(ood_scores, "OOD")?;
    let n = id_scores.len();
    let id = sorted(id_scores);
    // smallest count of ID scores that reaches the target rate
    let need = (TPR_NUM * n).div_ceil(TPR_DEN);
    let eta = id[n - need];
    let passed = ood_scores.iter().filter(|&&s| s >= eta).count();
    Ok((passed as f64 / ood_scores.len() as f64, eta))
}

/// Mann–Whitney AUROC: `P(id > ood) + ½ P(id = ood)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    non_empty(id_scores, "ID")?;
    non_empty(ood_scores, "OOD")?;
    let ood = sorted(ood_scores);
    // numerator in half-units: 2·#greater + #equal
    let mut half_units: u128 = 0;
    for &a in id_scores {
        let below = ood.partition_point(|&b| b < a);
        let not_above = ood.partition_point(|&b| b <= a);
        half_units += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * id_scores.len() as u128 * ood.len() as u128;
    Ok(half_units as f64 / pairs as f64)
}

/// ROC points `(fpr, tpr)` from the strictest threshold down, starting at
/// `(0, 0)` and ending at `(1, 1)`. Tied scores move diagonally.
pub fn roc_curve(id_scores: &[f64], ood_scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    non_empty(id_scores, "ID")?;
    non_empty(ood_scores, "OOD")?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0.total_cmp(&s) == Ordering::Equal {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_ood, tp as f64 / n_id));
    }
    Ok(points)
}

/// Trapezoid-rule area under [`roc_curve`].
pub fn trapezoid_auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let pts = roc_curve(id_scores, ood_scores)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

pub fn id_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptySet("prediction"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
