//! Test-time OOD scores and the thresholded detector.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingRecord;
use crate::encoder::TextFeatures;
use crate::error::{Error, Result};
use crate::regions::cosine_logits;
use crate::vecops::{argmax, softmax_with_log};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Id,
    Ood,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Id => "id",
            Source::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_index: usize,
    pub source: Source,
    pub score: f64,
    pub predicted_class: usize,
}

/// Maximum softmax probability over cosine similarities.
pub fn mcm_score(f: &[f64], text: &TextFeatures, tau: f64) -> Result<f64> {
    let (p, _) = softmax_with_log(&cosine_logits(f, text, tau)?);
    Ok(p.into_iter().fold(0.0, f64::max))
}

/// Global MCM plus the best local MCM. `locals` is `R x D` row-major.
pub fn glmcm_score(global: &[f64], locals: &[f64], text: &TextFeatures, tau: f64) -> Result<f64> {
    if locals.is_empty() {
        return Err(Error::Config("GL-MCM needs at least one local region".into()));
    }
    let mut best_local = 0.0f64;
    for f in locals.chunks_exact(text.dim()) {
        best_local = best_local.max(mcm_score(f, text, tau)?);
    }
    Ok(mcm_score(global, text, tau)? + best_local)
}

/// `ID` iff `score >= eta`.
pub fn detect(score: f64, eta: f64) -> Decision {
    if score >= eta {
        Decision::Id
    } else {
        Decision::Ood
    }
}

/// Global-term argmax; ties go to the lowest class index.
pub fn predict_class(global: &[f64], text: &TextFeatures, tau: f64) -> Result<usize> {
    Ok(argmax(&cosine_logits(global, text, tau)?))
}

pub fn score_record(
    index: usize,
    record: &EmbeddingRecord,
    source: Source,
    text: &TextFeatures,
    tau: f64,
) -> Result<ScoredSample> {
    Ok(ScoredSample {
        sample_index: index,
        source,
        score: glmcm_score(&record.global, &record.locals, text, tau)?,
        predicted_class: predict_class(&record.global, text, tau)?,
    })
}

pub fn score_records(
    records: &[EmbeddingRecord],
    source: Source,
    text: &TextFeatures,
    tau: f64,
) -> Result<Vec<ScoredSample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| score_record(i, r, source, text, tau))
        .collect()
}

/// CSV with header `sample_index,source,score,predicted_class`.
pub fn write_scores_csv<W: Write>(samples: &[ScoredSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

pub fn write_scores_file(samples: &[ScoredSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scores_csv(samples, std::io::BufWriter::new(file))
}

pub fn read_scores_csv<R: std::io::Read>(input: R) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
