//! Per-token emission scores from a hand-crafted-feature linear model.
//!
//! The scorer is deliberately pluggable: anything that produces an `n x L`
//! log-score table can drive the lattice. The default extracts sparse lexical
//! features and multiplies them by a dense weight matrix.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;

/// Sparse feature vector: unique interned ids with finite values.
pub type FeatureVector = Vec<(usize, f64)>;

/// Interns feature strings to dense ids. Frozen after the first training
/// pass; unseen features afterwards map to `None` and contribute nothing.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FeatureDictionary {
    map: HashMap<String, usize>,
    names: Vec<String>,
    frozen: bool,
}

impl FeatureDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn intern(&mut self, name: &str) -> Option<usize> {
        if let Some(&id) = self.map.get(name) {
            return Some(id);
        }
        if self.frozen {
            return None;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.map.insert(name.to_string(), id);
        Some(id)
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.map.get(name).copied()
    }
}

/// Raw (string) features for token `i` of a sentence: word identity, shape,
/// affixes, capitalization/digit flags, neighbor words, and a bias.
pub fn featurize(sentence: &Sentence, i: usize) -> Vec<String> {
    let word = sentence.tokens[i].surface.as_str();
    let lower = word.to_lowercase();
    let mut feats = Vec::with_capacity(16);
    feats.push("bias".to_string());
    feats.push(format!("w={lower}"));
    feats.push(format!("shape={}", word_shape(word)));
    let chars: Vec<char> = lower.chars().collect();
    for k in 1..=3usize.min(chars.len()) {
        feats.push(format!("pre{k}={}", chars[..k].iter().collect::<String>()));
        feats.push(format!(
            "suf{k}={}",
            chars[chars.len() - k..].iter().collect::<String>()
        ));
    }
    if word.chars().next().is_some_and(|c| c.is_uppercase()) {
        feats.push("cap".to_string());
    }
    if !word.is_empty() && word.chars().all(|c| c.is_uppercase()) {
        feats.push("allcaps".to_string());
    }
    if word.chars().any(|c| c.is_ascii_digit()) {
        feats.push("digit".to_string());
    }
    let prev = if i == 0 {
        "<BOS>".to_string()
    } else {
        sentence.tokens[i - 1].surface.to_lowercase()
    };
    let next = if i + 1 == sentence.len() {
        "<EOS>".to_string()
    } else {
        sentence.tokens[i + 1].surface.to_lowercase()
    };
    feats.push(format!("prev={prev}"));
    feats.push(format!("next={next}"));
    feats
}

fn word_shape(word: &str) -> String {
    word.chars()
        .map(|c| {
            if c.is_uppercase() {
                'X'
            } else if c.is_lowercase() {
                'x'
            } else if c.is_ascii_digit() {
                'd'
            } else {
                c
            }
        })
        .collect()
}

/// Linear emission scorer: dense `[num_features x num_labels]` weights over
/// a feature dictionary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmissionModel {
    pub dict: FeatureDictionary,
    pub weights: Array2<f64>,
    pub num_labels: usize,
}

impl EmissionModel {
    pub fn new(dict: FeatureDictionary, num_labels: usize) -> Self {
        let weights = Array2::zeros((dict.len(), num_labels));
        EmissionModel {
            dict,
            weights,
            num_labels,
        }
    }

    /// Map raw features to interned unit-valued sparse vectors; unseen
    /// features after freezing are dropped.
    pub fn featurize_sentence(&self, sentence: &Sentence) -> Vec<FeatureVector> {
        (0..sentence.len())
            .map(|i| {
                featurize(sentence, i)
                    .iter()
                    .filter_map(|f| self.dict.lookup(f))
                    .map(|id| (id, 1.0))
                    .collect()
            })
            .collect()
    }

    /// Emission log-score table for pre-featurized tokens.
    pub fn scores(&self, features: &[FeatureVector]) -> Array2<f64> {
        let mut out = Array2::zeros((features.len(), self.num_labels));
        for (i, fv) in features.iter().enumerate() {
            for &(f, v) in fv {
                for k in 0..self.num_labels {
                    out[(i, k)] += v * self.weights[(f, k)];
                }
            }
        }
        out
    }

    /// Chain rule through the linear layer: `acc[f,k] += value(f at i) * g[i,k]`.
    pub fn gradient_accumulate(
        &self,
        features: &[FeatureVector],
        grad_per_label: ArrayView2<f64>,
        accumulator: &mut Array2<f64>,
    ) {
        for (i, fv) in features.iter().enumerate() {
            for &(f, v) in fv {
                for k in 0..self.num_labels {
                    accumulator[(f, k)] += v * grad_per_label[(i, k)];
                }
            }
        }
    }
}

/// Anything that can produce an emission score table for a sentence.
pub trait EmissionScorer {
    fn emit_scores(&self, sentence: &Sentence) -> Array2<f64>;
}

impl EmissionScorer for EmissionModel {
    fn emit_scores(&self, sentence: &Sentence) -> Array2<f64> {
        self.scores(&self.featurize_sentence(sentence))
    }
}
