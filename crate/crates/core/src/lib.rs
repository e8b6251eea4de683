//! Geometry-aware prompt optimization for few-shot out-of-distribution
//! detection over cached vision-language embeddings.
//!
//! A learnable `D x M` prompt matrix is trained so that ID-relevant local
//! features fall inside its column space and ID-irrelevant regions fall in
//! the orthogonal complement, alongside the usual cross-entropy and entropy
//! terms. Detection uses the global-local maximum concept matching score.
//!
//! Module map:
//! - [`embedstore`]: the `.sbcp` binary dataset format
//! - [`subspace`]: regularized projector algebra over the prompt matrix
//! - [`encoder`]: prompt + class embedding to text feature
//! - [`regions`]: local class probabilities and ID-irrelevant region selection
//! - [`losses`] and [`grad`]: objective terms and their exact gradient
//! - [`scoring`] and [`metrics`]: MCM / GL-MCM scores, FPR95, AUROC
//! - [`trainer`]: SGD loop, checkpoints, evaluation
//! - [`synth`]: planted-subspace benchmark generator

pub mod cli;
pub mod embedstore;
pub mod encoder;
pub mod error;
pub mod grad;
pub mod losses;
pub mod metrics;
pub mod regions;
pub mod scoring;
pub mod subspace;
pub mod synth;
pub mod trainer;

mod vecops;

pub use error::{Error, Result};

/// Independent deterministic random streams derived from one user seed.
pub(crate) mod seeding {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const PROMPT_INIT: u64 = 1;
    pub const ENCODER_MIX: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SYNTH: u64 = 4;

    pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }
}
