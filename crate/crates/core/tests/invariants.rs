//! Randomized invariants for the corpus, lattice, schedule, and perturbation
//! layers.

mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use noisyner::confidence::{keep_ratio, Group, ScheduleConfig};
use noisyner::corpus::{
    entity_prf, extract_spans, parse_conll, serialize_conll, tags_of_spans, Corpus, EntitySpan,
    TagSet,
};
use noisyner::lattice::{
    constrained_log_marginal, forward_backward, ConstraintMask, Lattice,
};
use noisyner::noise::{is_valid_bio2, perturb, PerturbationConfig};
use noisyner::LabelId;

use common::{random_lattice, random_mask, synthetic_corpus};

fn fixed_tagset() -> TagSet {
    let mut ts = TagSet::new();
    ts.ensure_type("PER");
    ts.ensure_type("LOC");
    ts
}

/// Arbitrary valid-BIO2 tag sequence: canonicalize random ids through
/// span extraction (permissive) and regeneration.
fn bio2_tags(len: usize, raw: &[usize], ts: &TagSet) -> Vec<LabelId> {
    let ids: Vec<LabelId> = raw.iter().map(|&r| LabelId(r % ts.len())).collect();
    let spans = extract_spans(&ids, ts);
    tags_of_spans(&spans, len, ts)
}

proptest! {
    #[test]
    fn corpus_serialize_parse_roundtrip(
        sentences in prop::collection::vec(
            prop::collection::vec(("[a-z]{1,8}", 0usize..5), 1..8),
            1..6,
        )
    ) {
        let ts = fixed_tagset();
        let text: String = sentences
            .iter()
            .map(|tokens| {
                let raw: Vec<usize> = tokens.iter().map(|(_, t)| *t).collect();
                let tags = bio2_tags(tokens.len(), &raw, &ts);
                tokens
                    .iter()
                    .zip(&tags)
                    .map(|((w, _), &t)| format!("{w} {}\n", ts.tag_str(t)))
                    .collect::<String>()
                    + "\n"
            })
            .collect();
        let corpus = parse_conll(&text, 0, 1).unwrap();
        let rendered = serialize_conll(&corpus);
        // well-formed BIO2 input survives the roundtrip verbatim
        prop_assert_eq!(text, rendered);
    }

    #[test]
    fn spans_tags_roundtrip(raw in prop::collection::vec(0usize..5, 1..12)) {
        let ts = fixed_tagset();
        let tags = bio2_tags(raw.len(), &raw, &ts);
        let spans = extract_spans(&tags, &ts);
        // non-overlapping, in order, and regenerating tags is the identity
        for w in spans.windows(2) {
            prop_assert!(w[0].end <= w[1].start);
        }
        prop_assert_eq!(tags_of_spans(&spans, raw.len(), &ts), tags);
    }

    #[test]
    fn prf_swap_symmetry(
        raw_a in prop::collection::vec(0usize..5, 6),
        raw_b in prop::collection::vec(0usize..5, 6),
    ) {
        let ts = fixed_tagset();
        let a = vec![bio2_tags(6, &raw_a, &ts)];
        let b = vec![bio2_tags(6, &raw_b, &ts)];
        let ab = entity_prf(&a, &b, &ts).unwrap();
        let ba = entity_prf(&b, &a, &ts).unwrap();
        prop_assert!((ab.overall.precision - ba.overall.recall).abs() < 1e-12);
        prop_assert!((ab.overall.recall - ba.overall.precision).abs() < 1e-12);
        prop_assert!((ab.overall.f1 - ba.overall.f1).abs() < 1e-12);
    }

    #[test]
    fn alpha_beta_consistency(seed in 0u64..10_000, n in 1usize..7, l in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (em, trans) = random_lattice(&mut rng, n, l);
        let lattice = Lattice::new(em.view(), &trans);
        let tables = forward_backward(&lattice, None).unwrap();
        for i in 0..n {
            let row: Vec<f64> = (0..l)
                .map(|k| tables.log_alpha[(i, k)] + tables.log_beta[(i, k)])
                .collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            prop_assert!((lse - tables.log_z).abs() < 1e-9,
                "position {}: {} vs log_z {}", i, lse, tables.log_z);
        }
    }

    #[test]
    fn mask_shrink_monotonicity(seed in 0u64..10_000, n in 1usize..6, l in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (em, trans) = random_lattice(&mut rng, n, l);
        let lattice = Lattice::new(em.view(), &trans);
        let rows = random_mask(&mut rng, n, l);
        let base = constrained_log_marginal(&lattice, &ConstraintMask::from_sets(rows.clone()))
            .unwrap();
        // bound: a log-probability, and exactly 0 for the full mask
        prop_assert!(base <= 1e-12);
        let full = constrained_log_marginal(
            &lattice,
            &ConstraintMask::full(n, l),
        )
        .unwrap();
        prop_assert!(full.abs() <= 1e-12);
        // drop one allowed label (keeping rows non-empty): never increases
        let mut shrunk = rows.clone();
        'outer: for i in 0..n {
            if shrunk[i].iter().filter(|&&b| b).count() > 1 {
                for k in 0..l {
                    if shrunk[i][k] {
                        shrunk[i][k] = false;
                        break 'outer;
                    }
                }
            }
        }
        if shrunk != rows {
            let smaller =
                constrained_log_marginal(&lattice, &ConstraintMask::from_sets(shrunk)).unwrap();
            prop_assert!(smaller <= base + 1e-12, "{} > {}", smaller, base);
        }
    }

    #[test]
    fn keep_ratio_bounds_and_monotone(
        tau in 0.0f64..=1.0,
        k in 1usize..20,
        group_positive in any::<bool>(),
    ) {
        let group = if group_positive { Group::Positive } else { Group::Negative };
        let cfg = ScheduleConfig {
            tau_positive: tau,
            tau_negative: tau,
            warmup_epochs: k,
        };
        let mut prev = f64::INFINITY;
        for e in 0..2 * k {
            let r = keep_ratio(e, &cfg, group);
            prop_assert!((1.0 - tau..=1.0).contains(&r));
            prop_assert!(r <= prev);
            prev = r;
        }
        prop_assert_eq!(keep_ratio(2 * k, &cfg, group), 1.0 - tau);
    }

    #[test]
    fn perturbation_deterministic_and_valid(
        seed in 0u64..1_000,
        recall in 0.3f64..1.0,
        precision in 0.7f64..1.0,
    ) {
        let corpus = synthetic_corpus(30, seed);
        let cfg = PerturbationConfig {
            target_recall: recall,
            target_precision: precision,
            seed,
            ..PerturbationConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            perturb(&corpus, &cfg, &mut rng)
        };
        // a tiny corpus can lack room for enough spurious spans; skip those
        let (noisy_a, ledger_a) = match run() {
            Ok(out) => out,
            Err(noisyner::NoiseError::NoRoomForSpurious { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let (noisy_b, ledger_b) = run().unwrap();
        prop_assert_eq!(&noisy_a, &noisy_b);
        prop_assert_eq!(&ledger_a.noisy_tokens(), &ledger_b.noisy_tokens());
        prop_assert!(is_valid_bio2(&noisy_a));
        // every flagged token really is corrupted
        for &(sid, ti) in &ledger_a.noisy_tokens() {
            let token = &noisy_a.sentences[sid].tokens[ti];
            prop_assert_ne!(Some(token.observed), token.gold);
        }
    }
}

#[test]
fn emission_scores_linear_in_weights() {
    // scores(aW1 + bW2) == a*scores(W1) + b*scores(W2) for a shared dictionary
    let corpus: Corpus = synthetic_corpus(5, 9);
    let model = noisyner::trainer::Model::init(&corpus);
    let dims = model.emission.weights.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w1 = Array2::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0));
    let w2 = Array2::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0));
    let (a, b) = (0.37, -1.25);

    let mut em = model.emission.clone();
    let sentence = &corpus.sentences[0];
    let feats = em.featurize_sentence(sentence);
    em.weights = w1.clone();
    let s1 = em.scores(&feats);
    em.weights = w2.clone();
    let s2 = em.scores(&feats);
    em.weights = &w1 * a + &w2 * b;
    let s12 = em.scores(&feats);
    for ((x, y), z) in s1.iter().zip(s2.iter()).zip(s12.iter()) {
        assert!((a * x + b * y - z).abs() < 1e-9);
    }
}

#[test]
fn spurious_spans_only_convert_o_tokens() {
    // composition bookkeeping: removed spans were positive in gold, spurious
    // spans sit on gold-O or removed positions, and gold is never touched
    let corpus = synthetic_corpus(60, 13);
    let cfg = PerturbationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (noisy, ledger) = perturb(&corpus, &cfg, &mut rng).unwrap();
    for (clean_s, noisy_s) in corpus.sentences.iter().zip(&noisy.sentences) {
        for (clean_t, noisy_t) in clean_s.tokens.iter().zip(&noisy_s.tokens) {
            assert_eq!(clean_t.gold, noisy_t.gold);
        }
    }
    let removed: Vec<&EntitySpan> = ledger.removed_entities.iter().collect();
    for span in &removed {
        for i in span.start..span.end {
            let token = &noisy.sentences[span.sentence_id].tokens[i];
            assert!(noisy.tagset.is_positive(token.gold.unwrap()));
        }
    }
}
