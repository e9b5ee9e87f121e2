//! Per-token confidence estimation, the epoch-indexed keep-ratio schedule,
//! trusted/untrusted splitting, position/type calibration of untrusted
//! positives, and constraint-mask construction.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelId, TagSet};
use crate::lattice::{forward_backward, marginals, ConstraintMask, Lattice};
use crate::LatticeError;

/// How token confidence is normalized: `Global` uses CRF marginals,
/// `Local` a per-token softmax of the emission row (transitions ignored).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Trusted,
    Untrusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelPart {
    Position,
    Type,
}

/// Calibrated scores for an untrusted positive label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub s_position: f64,
    pub s_type: f64,
    pub kept_part: LabelPart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub sentence_id: usize,
    pub token_index: usize,
    pub observed: LabelId,
    pub score: f64,
    pub group: Group,
    pub verdict: Verdict,
    pub calibration: Option<Calibration>,
}

/// Keep-ratio schedule: anneals linearly from 1 to `1 - tau` over `warmup`
/// epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub tau_positive: f64,
    pub tau_negative: f64,
    pub warmup_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            tau_positive: 0.005,
            tau_negative: 0.15,
            warmup_epochs: 5,
        }
    }
}

impl ScheduleConfig {
    pub fn tau(&self, group: Group) -> f64 {
        match group {
            Group::Positive => self.tau_positive,
            Group::Negative => self.tau_negative,
        }
    }
}

/// `r_l(e) = 1 - min{(e/K) * tau_l, tau_l}`.
pub fn keep_ratio(epoch: usize, cfg: &ScheduleConfig, group: Group) -> f64 {
    let tau = cfg.tau(group);
    let ramp = (epoch as f64 / cfg.warmup_epochs as f64) * tau;
    1.0 - ramp.min(tau)
}

/// Score every token of the observed tag sequence under the chosen strategy.
/// Returns the scores together with the full per-token label distribution
/// (used later for calibration).
pub struct TokenScores {
    pub scores: Vec<f64>,
    pub distribution: Array2<f64>,
}

pub fn score_tokens(
    lattice: &Lattice,
    observed: &[LabelId],
    strategy: Strategy,
) -> Result<TokenScores, LatticeError> {
    let distribution = match strategy {
        Strategy::Global => marginals(&forward_backward(lattice, None)?),
        Strategy::Local => softmax_rows(lattice),
    };
    let scores = observed
        .iter()
        .enumerate()
        .map(|(i, tag)| distribution[(i, tag.index())])
        .collect();
    Ok(TokenScores {
        scores,
        distribution,
    })
}

fn softmax_rows(lattice: &Lattice) -> Array2<f64> {
    let (n, num_labels) = lattice.emissions.dim();
    let mut out = Array2::zeros((n, num_labels));
    for i in 0..n {
        let row = lattice.emissions.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for k in 0..num_labels {
            out[(i, k)] = (row[k] - m).exp() / z;
        }
    }
    out
}

/// Rank each group by score and mark the top `floor(r_l(e) * |D_l|)` records
/// trusted. Ties at equal score break by (sentence_id, token_index) ascending.
pub fn split_trusted(records: &mut [ConfidenceRecord], epoch: usize, cfg: &ScheduleConfig) {
    for group in [Group::Positive, Group::Negative] {
        let mut idx: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.group == group)
            .map(|(i, _)| i)
            .collect();
        let total = idx.len();
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (&records[a], &records[b]);
            rb.score
                .partial_cmp(&ra.score)
                .unwrap()
                .then((ra.sentence_id, ra.token_index).cmp(&(rb.sentence_id, rb.token_index)))
        });
        let keep = (keep_ratio(epoch, cfg, group) * total as f64).floor() as usize;
        for (rank, &i) in idx.iter().enumerate() {
            records[i].verdict = if rank < keep {
                Verdict::Trusted
            } else {
                Verdict::Untrusted
            };
            records[i].calibration = None;
        }
    }
}

/// Position/type calibration for an untrusted positive label: average the
/// label distribution over labels sharing the observed position part and,
/// separately, over labels sharing the observed type part; keep whichever
/// part scores higher (exact tie keeps the position).
pub fn calibrate(
    observed: LabelId,
    distribution: ArrayView1<f64>,
    tagset: &TagSet,
) -> Calibration {
    let pos = tagset.position(observed).expect("positive label");
    let ty = tagset.type_index(observed).expect("positive label");
    let pos_labels = tagset.ids_with_position(pos);
    let ty_labels = tagset.ids_with_type(ty);
    let s_position =
        pos_labels.iter().map(|id| distribution[id.index()]).sum::<f64>() / pos_labels.len() as f64;
    let s_type =
        ty_labels.iter().map(|id| distribution[id.index()]).sum::<f64>() / ty_labels.len() as f64;
    let kept_part = if s_position >= s_type {
        LabelPart::Position
    } else {
        LabelPart::Type
    };
    Calibration {
        s_position,
        s_type,
        kept_part,
    }
}

/// Build the per-token allowed-label mask from verdicts:
/// trusted -> the observed label only; untrusted negative -> all labels;
/// untrusted positive -> labels sharing the kept part, plus `O`
/// (all labels when calibration is disabled).
pub fn build_mask(records: &[ConfidenceRecord], tagset: &TagSet) -> ConstraintMask {
    let num_labels = tagset.len();
    let mut mask = ConstraintMask::from_sets(vec![vec![false; num_labels]; records.len()]);
    for (i, record) in records.iter().enumerate() {
        debug_assert_eq!(record.token_index, i);
        match (record.verdict, record.group, record.calibration) {
            (Verdict::Trusted, _, _) => mask.allow(i, record.observed.index()),
            (Verdict::Untrusted, Group::Negative, _) | (Verdict::Untrusted, Group::Positive, None) => {
                for k in 0..num_labels {
                    mask.allow(i, k);
                }
            }
            (Verdict::Untrusted, Group::Positive, Some(cal)) => {
                let kept = match cal.kept_part {
                    LabelPart::Position => {
                        tagset.ids_with_position(tagset.position(record.observed).unwrap())
                    }
                    LabelPart::Type => {
                        tagset.ids_with_type(tagset.type_index(record.observed).unwrap())
                    }
                };
                for id in kept {
                    mask.allow(i, id.index());
                }
                mask.allow(i, tagset.outside().index());
            }
        }
    }
    mask
}

/// Assemble unverdicted records for one sentence from token scores.
pub fn records_for_sentence(
    sentence_id: usize,
    observed: &[LabelId],
    scores: &[f64],
    tagset: &TagSet,
) -> Vec<ConfidenceRecord> {
    observed
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&tag, &score))| ConfidenceRecord {
            sentence_id,
            token_index: i,
            observed: tag,
            score,
            group: if tagset.is_positive(tag) {
                Group::Positive
            } else {
                Group::Negative
            },
            verdict: Verdict::Trusted,
            calibration: None,
        })
        .collect()
}
