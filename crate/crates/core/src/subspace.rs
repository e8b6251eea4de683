//! Projector algebra over the prompt matrix.
//!
//! For `W` (`D x M`) and `S = WᵀW + εI`, the projector onto the prompt span is
//! `P = W S⁻¹ Wᵀ` and the complement projector is `I − P`. `P` is never
//! materialized: a [`Projector`] holds the Cholesky factor of `S` and applies
//! `P f = W (S⁻¹ (Wᵀ f))`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::vecops::norm;

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Relative pivot floor below which the Gram factorization counts as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// The learnable `D x M` matrix whose columns are the prompt vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    w: DMatrix<f64>,
    epsilon: f64,
}

impl PromptMatrix {
    pub fn new(w: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let (d, m) = w.shape();
        if m == 0 || m >= d {
            return Err(Error::Config(format!("prompt count M = {m} must satisfy 1 <= M < D = {d}")));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                term: "prompt matrix",
                detail: "non-finite entry".into(),
            });
        }
        Ok(PromptMatrix { w, epsilon })
    }

    /// Builds from prompt vectors given as columns.
    pub fn from_columns(columns: &[Vec<f64>], epsilon: f64) -> Result<Self> {
        let d = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != d) {
            return Err(Error::Config("prompt columns have unequal lengths".into()));
        }
        let w = DMatrix::from_fn(d, columns.len(), |i, j| columns[j][i]);
        PromptMatrix::new(w, epsilon)
    }

    pub fn zeros(dim: usize, prompts: usize, epsilon: f64) -> Result<Self> {
        PromptMatrix::new(DMatrix::zeros(dim, prompts), epsilon)
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_prompts(&self) -> usize {
        self.w.ncols()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        PromptMatrix::new(self.w.clone(), epsilon)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.w.norm()
    }

    /// `(1/M) Σ_m ω_m`.
    pub fn mean_prompt(&self) -> DVector<f64> {
        self.w.column_mean()
    }

    /// `WᵀW + εI`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut s = self.w.tr_mul(&self.w);
        for i in 0..s.nrows() {
            s[(i, i)] += self.epsilon;
        }
        s
    }
}

/// Result of splitting a feature into its in-span and complement parts.
/// `orthogonal` is computed as `f - parallel`, component by component.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub parallel: Vec<f64>,
    pub orthogonal: Vec<f64>,
}

/// A factorized `S = WᵀW + εI`, reusable across many features.
#[derive(Clone)]
pub struct Projector<'a> {
    w: &'a DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> Projector<'a> {
    pub fn new(prompts: &'a PromptMatrix) -> Result<Self> {
        let gram = prompts.gram();
        let singular = || Error::SingularGram {
            epsilon: prompts.epsilon,
        };
        let scale = gram.diagonal().max();
        if scale.is_nan() || scale <= 0.0 {
            return Err(singular());
        }
        let chol = Cholesky::new(gram).ok_or_else(singular)?;
        let floor = PIVOT_TOLERANCE * scale;
        if chol.l_dirty().diagonal().iter().any(|&l| l * l <= floor) {
            return Err(singular());
        }
        Ok(Projector { w: &prompts.w, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// `S⁻¹ v` for an `M`-vector.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn gram_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    fn check_dim(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: f.len(),
            });
        }
        Ok(())
    }

    /// `z = S⁻¹ Wᵀ f`, the coordinates of `P f` in the prompt basis.
    pub fn coefficients(&self, f: &[f64]) -> DVector<f64> {
        let a = self.w.tr_mul(&DVector::from_column_slice(f));
        self.solve(&a)
    }

    pub fn project_onto(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(f)?;
        let z = self.coefficients(f);
        Ok((self.w * z).data.into())
    }

    pub fn project_complement(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.split(f)?.orthogonal)
    }

    pub fn split(&self, f: &[f64]) -> Result<ProjectionPair> {
        let parallel = self.project_onto(f)?;
        let orthogonal = f.iter().zip(&parallel).map(|(a, b)| a - b).collect();
        Ok(ProjectionPair { parallel, orthogonal })
    }

    /// `(‖P f‖ / ‖f‖, ‖(I − P) f‖ / ‖f‖)`.
    pub fn alignment_ratios(&self, f: &[f64]) -> Result<(f64, f64)> {
        self.check_dim(f)?;
        let n = norm(f);
        if n == 0.0 {
            return Err(Error::ZeroFeature);
        }
        let pair = self.split(f)?;
        Ok((norm(&pair.parallel) / n, norm(&pair.orthogonal) / n))
    }
}

pub fn gram_inverse(prompts: &PromptMatrix) -> Result<DMatrix<f64>> {
    Ok(Projector::new(prompts)?.gram_inverse())
}

pub fn project_onto(prompts: &PromptMatrix, f: &[f64]) -> Result<Vec<f64>> {
    Projector::new(prompts)?.project_onto(f)
}

pub fn project_complement(prompts: &PromptMatrix, f: &[f64]) -> Result<Vec<f64>> {
    Projector::new(prompts)?.project_complement(f)
}

pub fn alignment_ratios(prompts: &PromptMatrix, f: &[f64]) -> Result<(f64, f64)> {
    Projector::new(prompts)?.alignment_ratios(f)
}
