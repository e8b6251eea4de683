//! Synthetic benchmark with a planted ID subspace.
//!
//! A seeded orthonormal basis `U` (`D x M*`) spans the ID subspace. Class
//! means are `μ_k = U a_k` with `a_k ~ N(0, I)`. ID features are
//! `μ_k + U (σ ξ)`; out-of-subspace vectors are Gaussian draws with their
//! `U` component removed, rescaled to the typical ID norm `√M*`, plus the same
//! in-span noise `U (σ ξ)`. Every stored vector is unit-normalized.
//!
//! Training records replace a fraction `ood_leak` of their local regions with
//! out-of-subspace vectors; those are the ground-truth ID-irrelevant regions.
//! OOD test records are built entirely from out-of-subspace vectors.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedstore::{sidecar_path, ClassTable, Dataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::seeding;
use crate::subspace::PromptMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub num_classes: usize,
    pub subspace_dim: usize,
    pub train_per_class: usize,
    pub id_test: usize,
    pub ood_test: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub noise_sigma: f64,
    pub ood_leak: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 64,
            num_classes: 5,
            subspace_dim: 8,
            train_per_class: 16,
            id_test: 200,
            ood_test: 200,
            grid_height: 4,
            grid_width: 4,
            noise_sigma: 0.05,
            ood_leak: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subspace_dim == 0 || self.subspace_dim >= self.dim {
            return bad(format!("need 1 <= M* < D, got M* = {}, D = {}", self.subspace_dim, self.dim));
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.train_per_class == 0 || self.id_test == 0 || self.ood_test == 0 {
            return bad("all sample counts must be >= 1".into());
        }
        if self.grid_height * self.grid_width == 0 {
            return bad("local grid must have at least one region".into());
        }
        if !(0.0..1.0).contains(&self.ood_leak) {
            return bad(format!("ood_leak must lie in [0, 1), got {}", self.ood_leak));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Leaked regions per training record.
    pub fn leaked_regions(&self) -> usize {
        (self.ood_leak * self.num_regions() as f64).round() as usize
    }
}

/// Ground truth written next to the training file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    /// `D x M*` row-major.
    pub planted_basis: Vec<f64>,
    /// Per training record, per region: `true` if drawn outside the subspace.
    pub train_region_ood: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn basis(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.config.dim, self.config.subspace_dim, &self.planted_basis)
    }

    pub fn write(&self, train_path: &Path) -> Result<()> {
        let path = sidecar_path(train_path, "truth.json");
        fs::write(&path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(train_path: &Path) -> Result<Self> {
        let path = sidecar_path(train_path, "truth.json");
        let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
    pub truth: GroundTruth,
}

impl SynthOutput {
    pub fn planted_basis(&self) -> DMatrix<f64> {
        self.truth.basis()
    }
}

struct Sampler<'a, R> {
    rng: &'a mut R,
    basis: &'a DMatrix<f64>,
    sigma: f64,
}

impl<R: Rng> Sampler<'_, R> {
    fn gaussian(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.rng.sample::<f64, _>(StandardNormal))
    }

    fn in_span_noise(&mut self) -> DVector<f64> {
        let xi = self.gaussian(self.basis.ncols()) * self.sigma;
        self.basis * xi
    }

    fn id_vector(&mut self, mean: &DVector<f64>) -> Vec<f64> {
        let v = mean + self.in_span_noise();
        store(v)
    }

    fn ood_vector(&mut self) -> Vec<f64> {
        let z = self.gaussian(self.basis.nrows());
        let mut c = &z - self.basis * self.basis.tr_mul(&z);
        let scale = (self.basis.ncols() as f64).sqrt() / c.norm();
        c *= scale;
        store(c + self.in_span_noise())
    }
}

/// Unit-normalizes and rounds through `f32`, so the in-memory dataset equals
/// what is written to disk.
fn store(v: DVector<f64>) -> Vec<f64> {
    let n = v.norm();
    v.iter().map(|x| (x / n) as f32 as f64).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = seeding::rng(cfg.seed, seeding::SYNTH);
    let (d, ms, k) = (cfg.dim, cfg.subspace_dim, cfg.num_classes);

    let raw = DMatrix::from_fn(d, ms, |_, _| rng.sample::<f64, _>(StandardNormal));
    let basis = raw.qr().q();
    let means: Vec<DVector<f64>> = (0..k)
        .map(|_| &basis * DVector::from_fn(ms, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let class_rows: Vec<Vec<f64>> = means.iter().map(|m| store(m.clone())).collect();
    let classes = ClassTable::from_rows(&class_rows)?;

    let regions = cfg.num_regions();
    let leaked = cfg.leaked_regions();
    let mut s = Sampler {
        rng: &mut rng,
        basis: &basis,
        sigma: cfg.noise_sigma,
    };

    let mut train = Vec::with_capacity(k * cfg.train_per_class);
    let mut truth_regions = Vec::with_capacity(train.capacity());
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..cfg.train_per_class {
            let mut mask: Vec<bool> = (0..regions).map(|i| i < leaked).collect();
            mask.shuffle(s.rng);
            let global = s.id_vector(mean);
            let locals = mask
                .iter()
                .flat_map(|&ood| if ood { s.ood_vector() } else { s.id_vector(mean) })
                .collect();
            train.push(EmbeddingRecord { label, global, locals });
            truth_regions.push(mask);
        }
    }

    let id_test = (0..cfg.id_test)
        .map(|i| {
            let label = i % k;
            let global = s.id_vector(&means[label]);
            let locals = (0..regions).flat_map(|_| s.id_vector(&means[label])).collect();
            EmbeddingRecord { label, global, locals }
        })
        .collect();

    // OOD records carry label 0; it is never used for scoring.
    let ood_test = (0..cfg.ood_test)
        .map(|_| {
            let global = s.ood_vector();
            let locals = (0..regions).flat_map(|_| s.ood_vector()).collect();
            EmbeddingRecord {
                label: 0,
                global,
                locals,
            }
        })
        .collect();

    let grid = Some((cfg.grid_height, cfg.grid_width));
    let truth = GroundTruth {
        config: cfg.clone(),
        planted_basis: (0..d).flat_map(|i| (0..ms).map(move |j| (i, j))).map(|(i, j)| basis[(i, j)]).collect(),
        train_region_ood: truth_regions,
    };
    Ok(SynthOutput {
        train: Dataset::new(classes.clone(), train, grid, true)?,
        id_test: Dataset::new(classes.clone(), id_test, grid, true)?,
        ood_test: Dataset::new(classes, ood_test, grid, true)?,
        truth,
    })
}

/// Shape of the small random problem used for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckShape {
    pub dim: usize,
    pub prompts: usize,
    pub num_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub records: usize,
    /// Standard deviation of the random prompt entries.
    pub prompt_std: f64,
}

impl Default for GradcheckShape {
    fn default() -> Self {
        GradcheckShape {
            dim: 32,
            prompts: 4,
            num_classes: 5,
            grid_height: 2,
            grid_width: 3,
            records: 8,
            prompt_std: 0.1,
        }
    }
}

/// Unit Gaussian features with uniform labels, plus random prompts.
pub fn gradcheck_instance(shape: &GradcheckShape, seed: u64, epsilon: f64) -> Result<(Dataset, PromptMatrix)> {
    let mut rng = seeding::rng(seed, seeding::SYNTH);
    let d = shape.dim;
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| store(DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)));
    let class_rows: Vec<Vec<f64>> = (0..shape.num_classes).map(|_| unit(&mut rng)).collect();
    let regions = shape.grid_height * shape.grid_width;
    let records = (0..shape.records)
        .map(|_| {
            let label = rng.random_range(0..shape.num_classes);
            let global = unit(&mut rng);
            let locals = (0..regions).flat_map(|_| unit(&mut rng)).collect();
            EmbeddingRecord { label, global, locals }
        })
        .collect();
    let ds = Dataset::new(
        ClassTable::from_rows(&class_rows)?,
        records,
        Some((shape.grid_height, shape.grid_width)),
        true,
    )?;
    let w = DMatrix::from_fn(d, shape.prompts, |_, _| shape.prompt_std * rng.sample::<f64, _>(StandardNormal));
    Ok((ds, PromptMatrix::new(w, epsilon)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            dim: 16,
            num_classes: 3,
            subspace_dim: 4,
            train_per_class: 2,
            id_test: 6,
            ood_test: 5,
            grid_height: 2,
            grid_width: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_leak_count() {
        let out = generate(&small()).unwrap();
        assert_eq!(out.train.records.len(), 6);
        assert_eq!(out.id_test.records.len(), 6);
        assert_eq!(out.ood_test.records.len(), 5);
        assert_eq!(out.train.num_regions(), 4);
        for mask in &out.truth.train_region_ood {
            assert_eq!(mask.iter().filter(|&&b| b).count(), 1);
        }
        let u = out.planted_basis();
        assert!((u.tr_mul(&u) - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { subspace_dim: 16, ..small() },
            SynthConfig { ood_leak: 1.0, ..small() },
            SynthConfig { id_test: 0, ..small() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }
}
