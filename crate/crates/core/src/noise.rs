//! Controlled annotation perturbation: lower the entity-level recall of a
//! gold corpus by deleting entity identities, then lower the precision by
//! inserting spurious spans over `O` runs. Every corruption is recorded in a
//! ledger so noise detectors can be scored against ground truth.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EntitySpan, Position, Prf};
use crate::{CorpusError, NoiseError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub target_recall: f64,
    pub target_precision: f64,
    pub seed: u64,
    pub max_spurious_span_len: usize,
    /// When set, recall lowering removes individual occurrences instead of
    /// whole (surface, type) identities.
    pub occurrence_level: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            target_recall: 0.5,
            target_precision: 0.9,
            seed: 0,
            max_spurious_span_len: 3,
            occurrence_level: false,
        }
    }
}

/// Ground-truth record of a perturbation: which spans were removed or
/// invented, and which tokens now carry a wrong tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseLedger {
    pub removed_entities: Vec<EntitySpan>,
    pub spurious_spans: Vec<EntitySpan>,
    /// Tokens whose observed tag is a wrong positive, as (sentence_id, token).
    pub noisy_positive: BTreeSet<(usize, usize)>,
    /// Tokens whose observed tag is a wrong `O`.
    pub noisy_negative: BTreeSet<(usize, usize)>,
}

impl NoiseLedger {
    pub fn merge(&mut self, other: NoiseLedger) {
        self.removed_entities.extend(other.removed_entities);
        self.spurious_spans.extend(other.spurious_spans);
        self.noisy_positive.extend(other.noisy_positive);
        self.noisy_negative.extend(other.noisy_negative);
    }

    /// Re-derive the per-token flags from the final corpus: a token is
    /// noisy-positive if its observed tag is a wrong positive, noisy-negative
    /// if it is a wrong `O`, and unflagged when observed matches gold again
    /// (a spurious span can land where a removed entity was).
    pub fn reconcile(&mut self, corpus: &Corpus) {
        let flagged: BTreeSet<(usize, usize)> = self.noisy_tokens();
        self.noisy_positive.clear();
        self.noisy_negative.clear();
        for (sid, tok) in flagged {
            let token = &corpus.sentences[sid].tokens[tok];
            if token.gold == Some(token.observed) {
                continue;
            }
            if corpus.tagset.is_positive(token.observed) {
                self.noisy_positive.insert((sid, tok));
            } else {
                self.noisy_negative.insert((sid, tok));
            }
        }
    }

    pub fn noisy_tokens(&self) -> BTreeSet<(usize, usize)> {
        self.noisy_positive
            .union(&self.noisy_negative)
            .cloned()
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.removed_entities.is_empty() && self.spurious_spans.is_empty()
    }
}

fn surface_of(corpus: &Corpus, span: &EntitySpan) -> String {
    corpus.sentences[span.sentence_id].tokens[span.start..span.end]
        .iter()
        .map(|t| t.surface.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Spans in `spans` that exactly match a gold span (boundaries and type).
fn matching<'a>(spans: &'a [EntitySpan], gold: &BTreeSet<EntitySpan>) -> Vec<&'a EntitySpan> {
    spans.iter().filter(|s| gold.contains(s)).collect()
}

/// Repeatedly delete a random entity identity — every occurrence of one
/// (surface form, type) pair — until entity recall drops to the target.
pub fn lower_recall<R: Rng>(
    corpus: &Corpus,
    target: f64,
    rng: &mut R,
    occurrence_level: bool,
) -> Result<(Corpus, NoiseLedger), NoiseError> {
    if !corpus.has_gold() {
        return Err(NoiseError::Corpus(CorpusError::MissingGold));
    }
    let mut out = corpus.clone();
    let mut ledger = NoiseLedger::default();

    let gold_spans = out.gold_spans()?;
    let gold_set: BTreeSet<EntitySpan> = gold_spans.iter().cloned().collect();
    let total_gold = gold_spans.len();
    if total_gold == 0 {
        return Ok((out, ledger));
    }

    // Surviving = observed spans exactly matching a gold span.
    let mut surviving: Vec<EntitySpan> = matching(&out.observed_spans(), &gold_set)
        .into_iter()
        .cloned()
        .collect();

    // Removal units: either identities grouping every occurrence, or single
    // occurrences.
    let mut units: Vec<Vec<EntitySpan>> = if occurrence_level {
        surviving.iter().map(|s| vec![s.clone()]).collect()
    } else {
        let mut identities: Vec<(String, usize)> = surviving
            .iter()
            .map(|s| (surface_of(&out, s), s.type_index))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        identities.sort();
        identities
            .into_iter()
            .map(|(surface, ty)| {
                surviving
                    .iter()
                    .filter(|s| s.type_index == ty && surface_of(&out, s) == surface)
                    .cloned()
                    .collect()
            })
            .collect()
    };

    let recall = |survivors: usize| survivors as f64 / total_gold as f64;
    while recall(surviving.len()) > target && !units.is_empty() {
        let pick = rng.gen_range(0..units.len());
        let removed = units.swap_remove(pick);
        for span in removed {
            retag_span_to_outside(&mut out, &span, &mut ledger);
            surviving.retain(|s| s != &span);
            ledger.removed_entities.push(span);
        }
    }
    ledger.removed_entities.sort();
    Ok((out, ledger))
}

fn retag_span_to_outside(corpus: &mut Corpus, span: &EntitySpan, ledger: &mut NoiseLedger) {
    let outside = corpus.tagset.outside();
    let sentence = &mut corpus.sentences[span.sentence_id];
    for i in span.start..span.end {
        let token = &mut sentence.tokens[i];
        token.observed = outside;
        if token.gold != Some(outside) {
            ledger.noisy_negative.insert((span.sentence_id, i));
        }
    }
}

/// Repeatedly insert a spurious entity over a run of `O` tokens until
/// precision drops to the target. Inserted spans never touch existing
/// observed entities (no adjacent positive token) and never coincide with a
/// gold span.
pub fn lower_precision<R: Rng>(
    corpus: &Corpus,
    target: f64,
    rng: &mut R,
    max_span_len: usize,
) -> Result<(Corpus, NoiseLedger), NoiseError> {
    let mut out = corpus.clone();
    let mut ledger = NoiseLedger::default();

    let gold_set: BTreeSet<EntitySpan> = if out.has_gold() {
        out.gold_spans()?.into_iter().collect()
    } else {
        // Without gold every existing observed span counts as true.
        out.observed_spans().into_iter().collect()
    };

    let mut observed = out.observed_spans();
    // Insertions never match gold, so the true count is fixed from here on.
    let true_count = matching(&observed, &gold_set).len();
    let precision =
        |total: usize| if total == 0 { 1.0 } else { true_count as f64 / total as f64 };

    while precision(observed.len()) > target {
        let len = rng.gen_range(1..=max_span_len.max(1));
        let candidate = draw_candidate(&out, len, max_span_len, &gold_set, rng).ok_or(
            NoiseError::NoRoomForSpurious {
                achieved: precision(observed.len()),
                target,
            },
        )?;
        apply_spurious(&mut out, &candidate, &mut ledger);
        observed.push(candidate);
    }
    ledger.spurious_spans.sort();
    Ok((out, ledger))
}

/// Pick a uniformly random feasible spurious span of the preferred length,
/// falling back to shorter/longer lengths when none fits.
fn draw_candidate<R: Rng>(
    corpus: &Corpus,
    preferred_len: usize,
    max_len: usize,
    gold_set: &BTreeSet<EntitySpan>,
    rng: &mut R,
) -> Option<EntitySpan> {
    let mut lens: Vec<usize> = vec![preferred_len];
    lens.extend((1..=max_len.max(1)).filter(|&l| l != preferred_len));
    for len in lens {
        let mut starts: Vec<(usize, usize)> = Vec::new();
        for sentence in &corpus.sentences {
            let outside = corpus.tagset.outside();
            let n = sentence.len();
            if n < len {
                continue;
            }
            for start in 0..=n - len {
                let all_outside = sentence.tokens[start..start + len]
                    .iter()
                    .all(|t| t.observed == outside);
                if !all_outside {
                    continue;
                }
                let before_ok = start == 0 || sentence.tokens[start - 1].observed == outside;
                let after_ok =
                    start + len == n || sentence.tokens[start + len].observed == outside;
                if before_ok && after_ok {
                    starts.push((sentence.id, start));
                }
            }
        }
        if starts.is_empty() {
            continue;
        }
        let &(sentence_id, start) = &starts[rng.gen_range(0..starts.len())];
        let num_types = corpus.tagset.types().len();
        let mut type_order: Vec<usize> = (0..num_types).collect();
        type_order.shuffle(rng);
        for type_index in type_order {
            let span = EntitySpan {
                sentence_id,
                start,
                end: start + len,
                type_index,
            };
            if !gold_set.contains(&span) {
                return Some(span);
            }
        }
    }
    None
}

fn apply_spurious(corpus: &mut Corpus, span: &EntitySpan, ledger: &mut NoiseLedger) {
    let b = corpus.tagset.id_of(Position::Begin, span.type_index);
    let i_tag = corpus.tagset.id_of(Position::Inside, span.type_index);
    let sentence = &mut corpus.sentences[span.sentence_id];
    for i in span.start..span.end {
        let token = &mut sentence.tokens[i];
        token.observed = if i == span.start { b } else { i_tag };
        if token.gold.is_none() || token.gold != Some(token.observed) {
            ledger.noisy_positive.insert((span.sentence_id, i));
        }
    }
    ledger.spurious_spans.push(span.clone());
}

/// Apply recall lowering then precision lowering (in that order) with one
/// RNG stream, merging the two ledgers.
pub fn perturb<R: Rng>(
    corpus: &Corpus,
    cfg: &PerturbationConfig,
    rng: &mut R,
) -> Result<(Corpus, NoiseLedger), NoiseError> {
    let (lowered, mut ledger) = lower_recall(corpus, cfg.target_recall, rng, cfg.occurrence_level)?;
    let (out, precision_ledger) =
        lower_precision(&lowered, cfg.target_precision, rng, cfg.max_spurious_span_len)?;
    ledger.merge(precision_ledger);
    ledger.reconcile(&out);
    Ok((out, ledger))
}

/// Entity-level recall and precision of the observed annotation against gold.
pub fn observed_quality(corpus: &Corpus) -> Result<(f64, f64), CorpusError> {
    let gold: BTreeSet<EntitySpan> = corpus.gold_spans()?.into_iter().collect();
    let observed = corpus.observed_spans();
    let matched = observed.iter().filter(|s| gold.contains(s)).count();
    let recall = if gold.is_empty() {
        1.0
    } else {
        matched as f64 / gold.len() as f64
    };
    let precision = if observed.is_empty() {
        1.0
    } else {
        matched as f64 / observed.len() as f64
    };
    Ok((recall, precision))
}

/// Token-level P/R/F1 of a predicted noisy-token set against the ledger.
pub fn score_noise_detection(flags: &BTreeSet<(usize, usize)>, ledger: &NoiseLedger) -> Prf {
    let truth = ledger.noisy_tokens();
    let matched = flags.intersection(&truth).count();
    Prf::from_counts(matched, flags.len(), truth.len())
}

/// Sanity check: perturbed observed tags are still valid BIO2.
pub fn is_valid_bio2(corpus: &Corpus) -> bool {
    corpus.sentences.iter().all(|s| {
        let tags = s.observed_tags();
        let mut normalized = tags.clone();
        crate::corpus::normalize_bio2(&mut normalized, &corpus.tagset);
        normalized == tags
    })
}
