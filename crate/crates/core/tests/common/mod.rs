//! Shared test support: brute-force lattice oracles (independent of the
//! library's dynamic programming), finite-difference gradients, random
//! lattice generators, and a synthetic corpus generator.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noisyner::corpus::{Corpus, Sentence, TagSet, Token};
use noisyner::lattice::{constrained_log_marginal, ConstraintMask, Lattice, TransitionModel};

/// All label sequences of length `n` over `l` labels, lexicographic order.
pub fn enumerate_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
    let mut paths = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::with_capacity(paths.len() * l);
        for p in &paths {
            for k in 0..l {
                let mut q = p.clone();
                q.push(k);
                next.push(q);
            }
        }
        paths = next;
    }
    paths
}

/// Path potential computed directly from the raw score tables. `trans` is the
/// `(L+2) x (L+2)` matrix with BOS at row `L` and EOS at column `L+1`.
pub fn oracle_path_score(em: &Array2<f64>, trans: &Array2<f64>, path: &[usize]) -> f64 {
    let l = em.ncols();
    let mut score = trans[(l, path[0])];
    for (i, &k) in path.iter().enumerate() {
        score += em[(i, k)];
        if i + 1 < path.len() {
            score += trans[(k, path[i + 1])];
        }
    }
    score + trans[(path[path.len() - 1], l + 1)]
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn path_allowed(path: &[usize], mask: Option<&Vec<Vec<bool>>>) -> bool {
    match mask {
        None => true,
        Some(m) => path.iter().enumerate().all(|(i, &k)| m[i][k]),
    }
}

/// Log partition over the (optionally masked) path set by enumeration.
pub fn oracle_log_z(em: &Array2<f64>, trans: &Array2<f64>, mask: Option<&Vec<Vec<bool>>>) -> f64 {
    let scores: Vec<f64> = enumerate_paths(em.nrows(), em.ncols())
        .iter()
        .filter(|p| path_allowed(p, mask))
        .map(|p| oracle_path_score(em, trans, p))
        .collect();
    logsumexp(&scores)
}

/// Per-token marginals by summing path probabilities.
pub fn oracle_marginals(em: &Array2<f64>, trans: &Array2<f64>) -> Array2<f64> {
    let (n, l) = em.dim();
    let log_z = oracle_log_z(em, trans, None);
    let mut p = Array2::zeros((n, l));
    for path in enumerate_paths(n, l) {
        let prob = (oracle_path_score(em, trans, &path) - log_z).exp();
        for (i, &k) in path.iter().enumerate() {
            p[(i, k)] += prob;
        }
    }
    p
}

/// Argmax path by enumeration; strict `>` keeps the lexicographically first
/// maximizer.
pub fn oracle_viterbi(em: &Array2<f64>, trans: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut best_path = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for path in enumerate_paths(em.nrows(), em.ncols()) {
        let score = oracle_path_score(em, trans, &path);
        if score > best {
            best = score;
            best_path = path;
        }
    }
    (best_path, best)
}

/// Central finite differences of the constrained log-marginal with respect to
/// every emission cell and transition entry.
pub fn fd_gradients(
    em: &Array2<f64>,
    trans: &TransitionModel,
    mask: &ConstraintMask,
    step: f64,
) -> (Array2<f64>, Array2<f64>) {
    let clm = |em: &Array2<f64>, trans: &TransitionModel| -> f64 {
        let lattice = Lattice::new(em.view(), trans);
        constrained_log_marginal(&lattice, mask).unwrap()
    };
    let mut em_grad = Array2::zeros(em.dim());
    for i in 0..em.nrows() {
        for k in 0..em.ncols() {
            let mut plus = em.clone();
            let mut minus = em.clone();
            plus[(i, k)] += step;
            minus[(i, k)] -= step;
            em_grad[(i, k)] = (clm(&plus, trans) - clm(&minus, trans)) / (2.0 * step);
        }
    }
    let dim = trans.scores.dim();
    let mut tr_grad = Array2::zeros(dim);
    for j in 0..dim.0 {
        for k in 0..dim.1 {
            let mut plus = trans.clone();
            let mut minus = trans.clone();
            plus.scores[(j, k)] += step;
            minus.scores[(j, k)] -= step;
            tr_grad[(j, k)] = (clm(em, &plus) - clm(em, &minus)) / (2.0 * step);
        }
    }
    (em_grad, tr_grad)
}

pub fn random_lattice(rng: &mut ChaCha8Rng, n: usize, l: usize) -> (Array2<f64>, TransitionModel) {
    let em = Array2::from_shape_fn((n, l), |_| rng.gen_range(-2.0..2.0));
    let mut trans = TransitionModel::zeros(l);
    for j in 0..l + 2 {
        for k in 0..l + 2 {
            trans.scores[(j, k)] = rng.gen_range(-2.0..2.0);
        }
    }
    (em, trans)
}

/// Random mask with every row non-empty.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<Vec<bool>> {
    (0..n)
        .map(|_| {
            let mut row: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.5)).collect();
            if row.iter().all(|&b| !b) {
                row[rng.gen_range(0..l)] = true;
            }
            row
        })
        .collect()
}

// --- synthetic corpus -------------------------------------------------------

const FILLERS: &[&str] = &[
    "the", "a", "and", "then", "while", "before", "after", "slowly", "again", "quietly", "soon",
    "there", "here", "once", "twice", "finally", "maybe", "perhaps", "often", "rarely",
];

fn per_name(i: usize) -> String {
    format!("Pedro{i}")
}
fn loc_name(i: usize) -> String {
    format!("Lisbon{i}")
}
fn org_name(i: usize) -> String {
    format!("Orgacorp{i}")
}

const LEXICON_SIZE: usize = 30;

/// Deterministic synthetic NER corpus with 3 entity types and
/// context-informative templates. Gold tags are set; observed = gold.
pub fn synthetic_corpus(n_sentences: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tagset = TagSet::new();
    for t in ["PER", "LOC", "ORG"] {
        tagset.ensure_type(t);
    }
    let mut sentences = Vec::with_capacity(n_sentences);
    for id in 0..n_sentences {
        sentences.push(synthetic_sentence(id, &mut rng, &mut tagset));
    }
    let mut corpus = Corpus { sentences, tagset };
    corpus.adopt_observed_as_gold();
    corpus
}

enum Slot {
    Lit(&'static str),
    Filler,
    Ent(&'static str),
}

fn synthetic_sentence(id: usize, rng: &mut ChaCha8Rng, tagset: &mut TagSet) -> Sentence {
    use Slot::*;
    let templates: Vec<Vec<Slot>> = vec![
        vec![Ent("PER"), Lit("went"), Lit("to"), Ent("LOC"), Filler],
        vec![Ent("PER"), Lit("met"), Ent("PER"), Lit("at"), Ent("ORG")],
        vec![Ent("ORG"), Lit("opened"), Lit("offices"), Lit("in"), Ent("LOC")],
        vec![Filler, Ent("PER"), Lit("works"), Lit("for"), Ent("ORG"), Filler],
        vec![Lit("trip"), Lit("to"), Ent("LOC"), Lit("was"), Filler, Filler],
        vec![Ent("LOC"), Lit("welcomed"), Ent("PER"), Filler],
        vec![Filler, Filler, Filler, Filler],
        vec![Ent("ORG"), Lit("hired"), Ent("PER"), Lit("from"), Ent("LOC")],
    ];
    let template = &templates[rng.gen_range(0..templates.len())];
    let mut tokens = Vec::new();
    for slot in template {
        match slot {
            Lit(word) => push_token(&mut tokens, word, "O", tagset),
            Filler => {
                let w = FILLERS[rng.gen_range(0..FILLERS.len())];
                push_token(&mut tokens, w, "O", tagset);
            }
            Ent(ty) => {
                let pick = rng.gen_range(0..LEXICON_SIZE);
                let surface = match *ty {
                    "PER" => per_name(pick),
                    "LOC" => loc_name(pick),
                    _ => org_name(pick),
                };
                push_token(&mut tokens, &surface, &format!("B-{ty}"), tagset);
                // two-token entities ~25% of the time
                if rng.gen_bool(0.25) {
                    let second = rng.gen_range(0..LEXICON_SIZE);
                    let surface2 = match *ty {
                        "PER" => per_name(second),
                        "LOC" => loc_name(second),
                        _ => org_name(second),
                    };
                    push_token(&mut tokens, &surface2, &format!("I-{ty}"), tagset);
                }
            }
        }
    }
    Sentence { id, tokens }
}

fn push_token(tokens: &mut Vec<Token>, surface: &str, tag: &str, tagset: &mut TagSet) {
    let observed = tagset.intern_tag(tag).unwrap();
    tokens.push(Token {
        surface: surface.to_string(),
        observed,
        gold: None,
    });
}
