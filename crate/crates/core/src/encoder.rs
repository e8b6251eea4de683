//! Text-feature encoder: maps the prompt matrix and a class embedding to a
//! unit-norm text feature `g_k`.
//!
//! Two modes:
//! - surrogate-linear: `g_k = normalize(c_k + A · mean(ω_1..ω_M))` with a fixed
//!   seeded mixing matrix `A` (`D x D`, entries `N(0, 1) / √D`)
//! - frozen: `g_k` are precomputed text features, constant in `W`

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedstore::ClassTable;
use crate::error::{Error, Result};
use crate::seeding;
use crate::subspace::PromptMatrix;
use crate::vecops::norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    SurrogateLinear,
    Frozen,
}

#[derive(Debug, Clone)]
enum Inner {
    Linear { mix: DMatrix<f64> },
    Frozen { features: TextFeatures },
}

#[derive(Debug, Clone)]
pub struct SurrogateEncoder {
    inner: Inner,
}

/// `K x D` unit-norm text features plus the pre-normalization norms needed
/// for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    dim: usize,
    rows: Vec<f64>,
    norms: Vec<f64>,
}

impl TextFeatures {
    /// Normalizes each row of `raw` (`K x dim`).
    pub fn from_raw(dim: usize, raw: &[f64]) -> Result<Self> {
        let mut rows = Vec::with_capacity(raw.len());
        let mut norms = Vec::with_capacity(raw.len() / dim);
        for (k, row) in raw.chunks_exact(dim).enumerate() {
            let n = norm(row);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::DegenerateTextFeature { class: k });
            }
            rows.extend(row.iter().map(|x| x / n));
            norms.push(n);
        }
        Ok(TextFeatures { dim, rows, norms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    /// Norm of row `k` before normalization.
    pub fn raw_norm(&self, k: usize) -> f64 {
        self.norms[k]
    }
}

impl SurrogateEncoder {
    pub fn surrogate_linear(dim: usize, seed: u64) -> Self {
        let mut rng = seeding::rng(seed, seeding::ENCODER_MIX);
        let scale = 1.0 / (dim as f64).sqrt();
        let mix = DMatrix::from_fn(dim, dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        SurrogateEncoder {
            inner: Inner::Linear { mix },
        }
    }

    /// Surrogate-linear encoder with an explicit mixing matrix.
    pub fn with_mix(mix: DMatrix<f64>) -> Result<Self> {
        if !mix.is_square() {
            return Err(Error::Config("mixing matrix must be square".into()));
        }
        Ok(SurrogateEncoder {
            inner: Inner::Linear { mix },
        })
    }

    pub fn frozen(features: &ClassTable) -> Result<Self> {
        let features = TextFeatures::from_raw(features.dim(), features.as_slice())?;
        Ok(SurrogateEncoder {
            inner: Inner::Frozen { features },
        })
    }

    pub fn mode(&self) -> EncoderMode {
        match self.inner {
            Inner::Linear { .. } => EncoderMode::SurrogateLinear,
            Inner::Frozen { .. } => EncoderMode::Frozen,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.mode() == EncoderMode::SurrogateLinear
    }

    pub fn mix(&self) -> Option<&DMatrix<f64>> {
        match &self.inner {
            Inner::Linear { mix } => Some(mix),
            Inner::Frozen { .. } => None,
        }
    }

    fn prompt_shift(mix: &DMatrix<f64>, prompts: &PromptMatrix) -> Result<DVector<f64>> {
        if mix.nrows() != prompts.dim() {
            return Err(Error::Dimension {
                expected: mix.nrows(),
                got: prompts.dim(),
            });
        }
        Ok(mix * prompts.mean_prompt())
    }

    /// Text feature for class `k` with name embedding `class_embedding`.
    pub fn encode_class(&self, prompts: &PromptMatrix, k: usize, class_embedding: &[f64]) -> Result<Vec<f64>> {
        match &self.inner {
            Inner::Frozen { features } => {
                if k >= features.len() {
                    return Err(Error::Dimension {
                        expected: features.len(),
                        got: k + 1,
                    });
                }
                Ok(features.row(k).to_vec())
            }
            Inner::Linear { mix } => {
                if class_embedding.len() != prompts.dim() {
                    return Err(Error::Dimension {
                        expected: prompts.dim(),
                        got: class_embedding.len(),
                    });
                }
                let shift = Self::prompt_shift(mix, prompts)?;
                let raw: Vec<f64> = class_embedding.iter().zip(shift.iter()).map(|(c, s)| c + s).collect();
                let n = norm(&raw);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(Error::DegenerateTextFeature { class: k });
                }
                Ok(raw.iter().map(|x| x / n).collect())
            }
        }
    }

    pub fn encode_all(&self, prompts: &PromptMatrix, classes: &ClassTable) -> Result<TextFeatures> {
        match &self.inner {
            Inner::Frozen { features } => {
                if features.len() != classes.len() {
                    return Err(Error::Config(format!(
                        "frozen text features have {} classes, dataset has {}",
                        features.len(),
                        classes.len()
                    )));
                }
                Ok(features.clone())
            }
            Inner::Linear { mix } => {
                if classes.dim() != prompts.dim() {
                    return Err(Error::Dimension {
                        expected: prompts.dim(),
                        got: classes.dim(),
                    });
                }
                let shift = Self::prompt_shift(mix, prompts)?;
                let raw: Vec<f64> = classes
                    .rows()
                    .flat_map(|row| row.iter().zip(shift.iter()).map(|(c, s)| c + s))
                    .collect();
                TextFeatures::from_raw(classes.dim(), &raw)
            }
        }
    }
}
