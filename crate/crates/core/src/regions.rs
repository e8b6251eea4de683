//! Class probabilities from cosine similarity and the split of local regions
//! into ID-irrelevant (`J`) and ID-relevant (`J'`) sets.
//!
//! A region is ID-irrelevant when the true label ranks below the top `C`
//! classes of that region's softmax. Rank is `1 + #{k : p_k > p_y}`, so ties
//! never push the true label down.

use serde::{Deserialize, Serialize};

use crate::encoder::TextFeatures;
use crate::error::{Error, Result};
use crate::vecops::{dot, norm, softmax_with_log};

pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxConfig {
    /// Temperature, shared by global and local probabilities.
    pub tau: f64,
    /// Rank threshold `C`.
    pub rank_c: usize,
}

impl SoftmaxConfig {
    pub fn for_classes(num_classes: usize) -> Self {
        SoftmaxConfig {
            tau: DEFAULT_TAU,
            rank_c: default_rank_threshold(num_classes),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.rank_c > num_classes {
            return Err(Error::Config(format!(
                "rank threshold C = {} exceeds K = {num_classes}",
                self.rank_c
            )));
        }
        Ok(())
    }
}

/// 100 for large label spaces, otherwise a fifth of `K` (at least 1).
pub fn default_rank_threshold(num_classes: usize) -> usize {
    if num_classes >= 200 {
        100
    } else {
        (num_classes / 5).max(1)
    }
}

/// `sim(f, g_k) / τ` for every class. Text features are unit-norm.
pub fn cosine_logits(f: &[f64], text: &TextFeatures, tau: f64) -> Result<Vec<f64>> {
    if f.len() != text.dim() {
        return Err(Error::Dimension {
            expected: text.dim(),
            got: f.len(),
        });
    }
    let n = norm(f);
    if n == 0.0 {
        return Err(Error::ZeroFeature);
    }
    let scale = 1.0 / (n * tau);
    Ok(text.rows().map(|g| dot(f, g) * scale).collect())
}

pub fn class_probs(f: &[f64], text: &TextFeatures, tau: f64) -> Result<Vec<f64>> {
    Ok(softmax_with_log(&cosine_logits(f, text, tau)?).0)
}

/// 1-based rank of class `y`, counting only strictly larger probabilities.
pub fn rank_of_true(p: &[f64], y: usize) -> usize {
    let py = p[y];
    1 + p.iter().filter(|&&pk| pk > py).count()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionPartition {
    /// ID-irrelevant regions, ascending.
    pub irrelevant: Vec<usize>,
    /// ID-relevant regions, ascending.
    pub relevant: Vec<usize>,
}

impl RegionPartition {
    pub fn total(&self) -> usize {
        self.irrelevant.len() + self.relevant.len()
    }

    /// Builds a partition from per-region membership in `J`.
    pub fn from_mask(in_irrelevant: impl IntoIterator<Item = bool>) -> Self {
        let mut out = RegionPartition::default();
        for (i, flag) in in_irrelevant.into_iter().enumerate() {
            if flag {
                out.irrelevant.push(i);
            } else {
                out.relevant.push(i);
            }
        }
        out
    }
}

/// Partitions the regions of `locals` (`R x D` row-major) for true label `y`.
pub fn partition_regions(
    locals: &[f64],
    y: usize,
    text: &TextFeatures,
    cfg: &SoftmaxConfig,
) -> Result<RegionPartition> {
    if y >= text.len() {
        return Err(Error::Config(format!("label {y} out of range for K = {}", text.len())));
    }
    if locals.is_empty() || !locals.len().is_multiple_of(text.dim()) {
        return Err(Error::Dimension {
            expected: text.dim(),
            got: locals.len(),
        });
    }
    let mask = locals
        .chunks_exact(text.dim())
        .map(|f| Ok(rank_of_true(&class_probs(f, text, cfg.tau)?, y) > cfg.rank_c))
        .collect::<Result<Vec<bool>>>()?;
    Ok(RegionPartition::from_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axes(k: usize, d: usize) -> TextFeatures {
        let raw: Vec<f64> = (0..k)
            .flat_map(|i| (0..d).map(move |j| if i == j { 1.0 } else { 0.0 }))
            .collect();
        TextFeatures::from_raw(d, &raw).unwrap()
    }

    #[test]
    fn sims_one_zero_minus_one() {
        // g rows: e0, e1, -e0; f = e0 gives sims (1, 0, -1)
        let text = TextFeatures::from_raw(2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let p = class_probs(&[1.0, 0.0], &text, 1.0).unwrap();
        let z = 1f64.exp() + 1.0 + (-1f64).exp();
        let expected = [1f64.exp() / z, 1.0 / z, (-1f64).exp() / z];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[0] - 0.66524).abs() < 1e-5);
        assert!((p[1] - 0.24473).abs() < 1e-5);
        assert!((p[2] - 0.09003).abs() < 1e-5);
    }

    #[test]
    fn dominant_similarity_at_low_temperature() {
        let p = class_probs(&[2.0, 0.0, 0.0], &axes(3, 3), 0.01).unwrap();
        // logit gap 1/τ = 100: the runners-up sit at e^-100, below f64 resolution at 1
        assert_eq!(p[0], 1.0);
        assert!((p[1] / (-100f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_sims_are_uniform() {
        let p = class_probs(&[0.0, 0.0, 0.0, 1.0], &axes(3, 4), 0.01).unwrap();
        for pk in p {
            assert!((pk - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_feature_rejected() {
        assert!(matches!(class_probs(&[0.0; 3], &axes(3, 3), 1.0), Err(Error::ZeroFeature)));
    }

    #[test]
    fn rank_rules() {
        assert_eq!(rank_of_true(&[0.1, 0.7, 0.2], 1), 1);
        assert_eq!(rank_of_true(&[0.25; 4], 3), 1);
        assert_eq!(rank_of_true(&[0.5, 0.3, 0.2], 2), 3);
        assert_eq!(rank_of_true(&[0.4, 0.4, 0.2], 1), 1);
    }

    #[test]
    fn boundary_thresholds() {
        let text = axes(3, 3);
        let locals = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.2, 0.1, 0.9];
        let all = partition_regions(&locals, 0, &text, &SoftmaxConfig { tau: 0.1, rank_c: 0 }).unwrap();
        assert_eq!(all.irrelevant, vec![0, 1, 2]);
        let none = partition_regions(&locals, 0, &text, &SoftmaxConfig { tau: 0.1, rank_c: 3 }).unwrap();
        assert!(none.irrelevant.is_empty());
        assert_eq!(none.relevant, vec![0, 1, 2]);
        let top1 = partition_regions(&locals, 0, &text, &SoftmaxConfig { tau: 0.1, rank_c: 1 }).unwrap();
        assert_eq!(top1.irrelevant, vec![1, 2]);
    }

    #[test]
    fn default_thresholds() {
        assert_eq!(default_rank_threshold(1000), 100);
        assert_eq!(default_rank_threshold(100), 20);
        assert_eq!(default_rank_threshold(5), 1);
        assert_eq!(default_rank_threshold(3), 1);
    }
}
