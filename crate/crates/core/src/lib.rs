//! A sequence-labeling toolkit for training named-entity taggers on noisy
//! annotations: a linear-chain CRF with per-token confidence estimation,
//! partial marginalization of untrusted labels, a cross-validated
//! self-training loop, and a controlled annotation-perturbation generator.

pub mod confidence;
pub mod corpus;
pub mod emission;
pub mod lattice;
pub mod noise;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected at least {needed} columns, found {found}")]
    BadLine {
        line: usize,
        found: usize,
        needed: usize,
    },
    #[error("unknown tag position prefix in `{0}`")]
    BadTag(String),
    #[error("line {line}: unknown tag position prefix in `{tag}`")]
    BadTagAt { line: usize, tag: String },
    #[error("corpus has no gold tags")]
    MissingGold,
    #[error("pred/gold length mismatch: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
}

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("empty lattice column at token {0}: all labels masked or -inf")]
    EmptyColumn(usize),
}

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("no eligible O-token span left; achieved precision {achieved:.4} > target {target:.4}")]
    NoRoomForSpurious { achieved: f64, target: f64 },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("tag set has no positive labels")]
    NoPositiveLabels,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at sentence {sentence_id} (epoch {epoch})")]
    NonFiniteLoss { sentence_id: usize, epoch: usize },
}

pub use corpus::{Corpus, EntitySpan, LabelId, Position, Sentence, TagSet, Token};
