//! Exact linear-chain CRF inference in log space: forward/backward, partition
//! function, marginals, Viterbi, and constrained (partial) marginalization
//! with analytic gradients.
//!
//! A path score is the sum of per-token emission scores and transition scores
//! including virtual BOS/EOS transitions. The partition function and all
//! probabilities are computed with logsumexp recursions; constraining a
//! lattice restricts each token to an allowed-label set.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::LatticeError;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Log-space transition scores over `L + 2` states; the two extra states are
/// the virtual BOS (index `L`) and EOS (index `L + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub scores: Array2<f64>,
    num_labels: usize,
}

impl TransitionModel {
    pub fn zeros(num_labels: usize) -> Self {
        TransitionModel {
            scores: Array2::zeros((num_labels + 2, num_labels + 2)),
            num_labels,
        }
    }

    pub fn from_matrix(scores: Array2<f64>) -> Self {
        let num_labels = scores.nrows() - 2;
        assert_eq!(scores.nrows(), scores.ncols());
        TransitionModel { scores, num_labels }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn bos(&self) -> usize {
        self.num_labels
    }

    pub fn eos(&self) -> usize {
        self.num_labels + 1
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.scores[(from, to)]
    }
}

/// Per-sentence potential table: `n x L` emission log-scores plus the shared
/// transition model.
#[derive(Debug, Clone, Copy)]
pub struct Lattice<'a> {
    pub emissions: ArrayView2<'a, f64>,
    pub transitions: &'a TransitionModel,
}

impl<'a> Lattice<'a> {
    pub fn new(emissions: ArrayView2<'a, f64>, transitions: &'a TransitionModel) -> Self {
        assert_eq!(emissions.ncols(), transitions.num_labels());
        Lattice {
            emissions,
            transitions,
        }
    }

    pub fn len(&self) -> usize {
        self.emissions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.nrows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.emissions.ncols()
    }
}

/// Per-token allowed-label sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMask {
    allowed: Vec<Vec<bool>>,
}

impl ConstraintMask {
    pub fn full(n: usize, num_labels: usize) -> Self {
        ConstraintMask {
            allowed: vec![vec![true; num_labels]; n],
        }
    }

    pub fn singletons(tags: &[crate::LabelId], num_labels: usize) -> Self {
        let mut mask = ConstraintMask {
            allowed: vec![vec![false; num_labels]; tags.len()],
        };
        for (i, tag) in tags.iter().enumerate() {
            mask.allowed[i][tag.index()] = true;
        }
        mask
    }

    pub fn from_sets(allowed: Vec<Vec<bool>>) -> Self {
        ConstraintMask { allowed }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn permits(&self, token: usize, label: usize) -> bool {
        self.allowed[token][label]
    }

    pub fn allow(&mut self, token: usize, label: usize) {
        self.allowed[token][label] = true;
    }

    pub fn allowed_row(&self, token: usize) -> &[bool] {
        &self.allowed[token]
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|row| row.iter().all(|&b| b))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardBackwardTables {
    pub log_alpha: Array2<f64>,
    pub log_beta: Array2<f64>,
    pub log_z: f64,
}

fn logsumexp(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().cloned().fold(NEG_INF, f64::max);
    if m == NEG_INF {
        return NEG_INF;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn masked_emission(lattice: &Lattice, mask: Option<&ConstraintMask>, i: usize, k: usize) -> f64 {
    match mask {
        Some(m) if !m.permits(i, k) => NEG_INF,
        _ => lattice.emissions[(i, k)],
    }
}

/// Log-space forward/backward over the (optionally masked) lattice.
pub fn forward_backward(
    lattice: &Lattice,
    mask: Option<&ConstraintMask>,
) -> Result<ForwardBackwardTables, LatticeError> {
    let n = lattice.len();
    let num_labels = lattice.num_labels();
    let t = lattice.transitions;
    assert!(n > 0, "empty lattice");
    if let Some(m) = mask {
        assert_eq!(m.len(), n, "mask length mismatch");
    }

    let mut log_alpha = Array2::from_elem((n, num_labels), NEG_INF);
    for k in 0..num_labels {
        log_alpha[(0, k)] = t.get(t.bos(), k) + masked_emission(lattice, mask, 0, k);
    }
    if (0..num_labels).all(|k| log_alpha[(0, k)] == NEG_INF) {
        return Err(LatticeError::EmptyColumn(0));
    }
    for i in 1..n {
        for k in 0..num_labels {
            let em = masked_emission(lattice, mask, i, k);
            if em == NEG_INF {
                continue;
            }
            log_alpha[(i, k)] =
                logsumexp((0..num_labels).map(|j| log_alpha[(i - 1, j)] + t.get(j, k))) + em;
        }
        if (0..num_labels).all(|k| log_alpha[(i, k)] == NEG_INF) {
            return Err(LatticeError::EmptyColumn(i));
        }
    }

    let mut log_beta = Array2::from_elem((n, num_labels), NEG_INF);
    for k in 0..num_labels {
        log_beta[(n - 1, k)] = t.get(k, t.eos());
    }
    for i in (0..n - 1).rev() {
        for j in 0..num_labels {
            log_beta[(i, j)] = logsumexp((0..num_labels).map(|k| {
                t.get(j, k) + masked_emission(lattice, mask, i + 1, k) + log_beta[(i + 1, k)]
            }));
        }
    }

    let log_z = logsumexp((0..num_labels).map(|k| log_alpha[(n - 1, k)] + log_beta[(n - 1, k)]));
    Ok(ForwardBackwardTables {
        log_alpha,
        log_beta,
        log_z,
    })
}

/// Per-token label marginals `p(y_i = k | x)` from unconstrained tables.
pub fn marginals(tables: &ForwardBackwardTables) -> Array2<f64> {
    let (n, num_labels) = tables.log_alpha.dim();
    let mut p = Array2::zeros((n, num_labels));
    for i in 0..n {
        for k in 0..num_labels {
            p[(i, k)] =
                (tables.log_alpha[(i, k)] + tables.log_beta[(i, k)] - tables.log_z).exp();
        }
    }
    p
}

/// Log-probability of one tag path: its potential minus the unconstrained
/// log partition.
pub fn sequence_log_prob(lattice: &Lattice, tags: &[crate::LabelId]) -> Result<f64, LatticeError> {
    let tables = forward_backward(lattice, None)?;
    Ok(path_score(lattice, tags) - tables.log_z)
}

/// Raw potential (log weight) of one tag path, BOS/EOS transitions included.
pub fn path_score(lattice: &Lattice, tags: &[crate::LabelId]) -> f64 {
    let t = lattice.transitions;
    let mut score = t.get(t.bos(), tags[0].index());
    for (i, tag) in tags.iter().enumerate() {
        score += lattice.emissions[(i, tag.index())];
        if i + 1 < tags.len() {
            score += t.get(tag.index(), tags[i + 1].index());
        }
    }
    score + t.get(tags[tags.len() - 1].index(), t.eos())
}

/// Log of the summed probability of all paths compatible with the mask.
pub fn constrained_log_marginal(
    lattice: &Lattice,
    mask: &ConstraintMask,
) -> Result<f64, LatticeError> {
    let unconstrained = forward_backward(lattice, None)?;
    let constrained = forward_backward(lattice, Some(mask))?;
    Ok(constrained.log_z - unconstrained.log_z)
}

/// Highest-scoring path. Ties break toward the lower label id.
pub fn viterbi(lattice: &Lattice) -> (Vec<crate::LabelId>, f64) {
    let n = lattice.len();
    let num_labels = lattice.num_labels();
    let t = lattice.transitions;

    let mut delta = Array2::from_elem((n, num_labels), NEG_INF);
    let mut back = Array2::zeros((n, num_labels));
    for k in 0..num_labels {
        delta[(0, k)] = t.get(t.bos(), k) + lattice.emissions[(0, k)];
    }
    for i in 1..n {
        for k in 0..num_labels {
            let mut best = NEG_INF;
            let mut arg = 0usize;
            for j in 0..num_labels {
                let s = delta[(i - 1, j)] + t.get(j, k);
                if s > best {
                    best = s;
                    arg = j;
                }
            }
            delta[(i, k)] = best + lattice.emissions[(i, k)];
            back[(i, k)] = arg;
        }
    }

    let mut best = NEG_INF;
    let mut last = 0usize;
    for k in 0..num_labels {
        let s = delta[(n - 1, k)] + t.get(k, t.eos());
        if s > best {
            best = s;
            last = k;
        }
    }
    let mut tags = vec![crate::LabelId(0); n];
    tags[n - 1] = crate::LabelId(last);
    for i in (1..n).rev() {
        last = back[(i, last)];
        tags[i - 1] = crate::LabelId(last);
    }
    (tags, best)
}

/// Gradients of the constrained log-marginal with respect to every emission
/// cell and transition entry: constrained minus unconstrained expected
/// feature counts.
#[derive(Debug, Clone)]
pub struct PartialMarginalGradients {
    pub emissions: Array2<f64>,
    pub transitions: Array2<f64>,
}

pub fn partial_marginal_gradients(
    lattice: &Lattice,
    mask: &ConstraintMask,
) -> Result<PartialMarginalGradients, LatticeError> {
    let unc = forward_backward(lattice, None)?;
    let con = forward_backward(lattice, Some(mask))?;

    let n = lattice.len();
    let num_labels = lattice.num_labels();
    let t = lattice.transitions;

    let mut emissions = Array2::zeros((n, num_labels));
    let p_con = marginals(&con);
    let p_unc = marginals(&unc);
    for i in 0..n {
        for k in 0..num_labels {
            emissions[(i, k)] = p_con[(i, k)] - p_unc[(i, k)];
        }
    }

    let mut transitions = Array2::zeros((num_labels + 2, num_labels + 2));
    // BOS -> k and k -> EOS expectations are the boundary marginals.
    for k in 0..num_labels {
        transitions[(t.bos(), k)] = p_con[(0, k)] - p_unc[(0, k)];
        transitions[(k, t.eos())] = p_con[(n - 1, k)] - p_unc[(n - 1, k)];
    }
    for i in 0..n - 1 {
        for j in 0..num_labels {
            for k in 0..num_labels {
                let e_con = (con.log_alpha[(i, j)]
                    + t.get(j, k)
                    + masked_emission(lattice, Some(mask), i + 1, k)
                    + con.log_beta[(i + 1, k)]
                    - con.log_z)
                    .exp();
                let e_unc = (unc.log_alpha[(i, j)]
                    + t.get(j, k)
                    + lattice.emissions[(i + 1, k)]
                    + unc.log_beta[(i + 1, k)]
                    - unc.log_z)
                    .exp();
                transitions[(j, k)] = transitions[(j, k)] + e_con - e_unc;
            }
        }
    }

    Ok(PartialMarginalGradients {
        emissions,
        transitions,
    })
}
