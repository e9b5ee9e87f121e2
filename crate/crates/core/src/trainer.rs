//! SGD training of the CRF under confidence-built constraint masks, the
//! cross-validated self-training loop, and the dev-set noise-rate search.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{
    build_mask, calibrate, records_for_sentence, score_tokens, split_trusted,
    ConfidenceRecord, Group, ScheduleConfig, Strategy, Verdict,
};
use crate::corpus::{entity_prf, Corpus, LabelId, PrfReport, TagSet};
use crate::emission::{featurize, EmissionModel, FeatureDictionary, FeatureVector};
use crate::lattice::{
    constrained_log_marginal, partial_marginal_gradients, viterbi, ConstraintMask, Lattice,
    TransitionModel,
};
use crate::TrainError;

/// Full parameter set of the tagger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub tagset: TagSet,
    pub emission: EmissionModel,
    pub transitions: TransitionModel,
}

impl Model {
    /// Zero-initialized model with a feature dictionary built from one pass
    /// over the corpus, then frozen.
    pub fn init(corpus: &Corpus) -> Self {
        let mut dict = FeatureDictionary::new();
        for sentence in &corpus.sentences {
            for i in 0..sentence.len() {
                for f in featurize(sentence, i) {
                    dict.intern(&f);
                }
            }
        }
        dict.freeze();
        let num_labels = corpus.tagset.len();
        Model {
            tagset: corpus.tagset.clone(),
            emission: EmissionModel::new(dict, num_labels),
            transitions: TransitionModel::zeros(num_labels),
        }
    }

    pub fn predict(&self, corpus: &Corpus) -> Vec<Vec<LabelId>> {
        corpus
            .sentences
            .iter()
            .map(|sentence| {
                let feats = self.emission.featurize_sentence(sentence);
                let em = self.emission.scores(&feats);
                let lattice = Lattice::new(em.view(), &self.transitions);
                viterbi(&lattice).0
            })
            .collect()
    }

    /// Entity P/R/F1 of Viterbi predictions against the corpus tags. The
    /// corpus may carry its own tag set; it is re-interned into the model's.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<PrfReport, TrainError> {
        let corpus = &crate::corpus::align_to(corpus, &self.tagset)?;
        let pred = self.predict(corpus);
        let reference: Vec<Vec<LabelId>> = corpus
            .sentences
            .iter()
            .map(|s| s.observed_tags())
            .collect();
        Ok(entity_prf(&pred, &reference, &self.tagset)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub schedule: ScheduleConfig,
    pub calibration_enabled: bool,
    pub shuffle: bool,
    /// Offset added to the schedule's epoch counter (used when the keep-ratio
    /// schedule should not reset between self-training rounds).
    pub epoch_offset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            l2_penalty: 1e-4,
            batch_size: 8,
            seed: 0,
            strategy: Strategy::Global,
            schedule: ScheduleConfig::default(),
            calibration_enabled: true,
            shuffle: true,
            epoch_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub trusted_positive: usize,
    pub trusted_negative: usize,
    pub untrusted_positive: usize,
    pub untrusted_negative: usize,
    pub dev: Option<PrfReport>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// Confidence records from the last epoch's estimation pass.
    pub final_records: Vec<ConfidenceRecord>,
}

/// Versioned, self-describing checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: Model,
    pub config_fingerprint: String,
    pub round: usize,
    pub epoch: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: Model, config_fingerprint: String, round: usize, epoch: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            config_fingerprint,
            round,
            epoch,
        }
    }
}

/// Deterministic named RNG sub-stream derived from one top-level seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the stream name, mixed with the seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Pre-featurized corpus: sparse features and observed tags per sentence.
pub struct Prepared {
    pub features: Vec<Vec<FeatureVector>>,
    pub observed: Vec<Vec<LabelId>>,
    pub sentence_ids: Vec<usize>,
}

pub fn prepare(model: &Model, corpus: &Corpus) -> Prepared {
    Prepared {
        features: corpus
            .sentences
            .iter()
            .map(|s| model.emission.featurize_sentence(s))
            .collect(),
        observed: corpus.sentences.iter().map(|s| s.observed_tags()).collect(),
        sentence_ids: corpus.sentences.iter().map(|s| s.id).collect(),
    }
}

/// One confidence-estimation pass over the corpus with the current model:
/// per-token records plus per-sentence label distributions.
fn confidence_pass(
    model: &Model,
    prepared: &Prepared,
    strategy: Strategy,
) -> Result<(Vec<Vec<ConfidenceRecord>>, Vec<Array2<f64>>), TrainError> {
    let mut records = Vec::with_capacity(prepared.features.len());
    let mut distributions = Vec::with_capacity(prepared.features.len());
    for (s, feats) in prepared.features.iter().enumerate() {
        let em = model.emission.scores(feats);
        let lattice = Lattice::new(em.view(), &model.transitions);
        let scored = score_tokens(&lattice, &prepared.observed[s], strategy)?;
        records.push(records_for_sentence(
            prepared.sentence_ids[s],
            &prepared.observed[s],
            &scored.scores,
            &model.tagset,
        ));
        distributions.push(scored.distribution);
    }
    Ok((records, distributions))
}

/// Mini-batch SGD pass on `-sum log p~(y|x)` + L2, over the given masks.
/// Returns the mean per-sentence negative log-likelihood.
pub fn train_epoch(
    model: &mut Model,
    prepared: &Prepared,
    masks: &[ConstraintMask],
    cfg: &TrainConfig,
    order: &[usize],
    epoch: usize,
) -> Result<f64, TrainError> {
    let num_labels = model.tagset.len();
    let mut weight_grad: Array2<f64> = Array2::zeros(model.emission.weights.dim());
    let mut trans_grad: Array2<f64> = Array2::zeros((num_labels + 2, num_labels + 2));
    let mut total_loss = 0.0;

    for batch in order.chunks(cfg.batch_size.max(1)) {
        weight_grad.fill(0.0);
        trans_grad.fill(0.0);
        for &s in batch {
            let em = model.emission.scores(&prepared.features[s]);
            let lattice = Lattice::new(em.view(), &model.transitions);
            let log_marginal = constrained_log_marginal(&lattice, &masks[s])?;
            let loss = -log_marginal;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    sentence_id: prepared.sentence_ids[s],
                    epoch,
                });
            }
            total_loss += loss;
            let grads = partial_marginal_gradients(&lattice, &masks[s])?;
            // d(-log p~)/d(score) = -(constrained - unconstrained) expectation
            let upstream = grads.emissions.mapv(|g| -g);
            model
                .emission
                .gradient_accumulate(&prepared.features[s], upstream.view(), &mut weight_grad);
            trans_grad.scaled_add(-1.0, &grads.transitions);
        }
        let scale = cfg.learning_rate / batch.len() as f64;
        model
            .emission
            .weights
            .zip_mut_with(&weight_grad, |w, &g| {
                *w -= scale * g + cfg.learning_rate * cfg.l2_penalty * *w
            });
        model
            .transitions
            .scores
            .zip_mut_with(&trans_grad, |w, &g| {
                *w -= scale * g + cfg.learning_rate * cfg.l2_penalty * *w
            });
    }
    Ok(total_loss / order.len() as f64)
}

fn validate(corpus: &Corpus) -> Result<(), TrainError> {
    if corpus.sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if corpus.tagset.types().is_empty() {
        return Err(TrainError::NoPositiveLabels);
    }
    Ok(())
}

/// Train with epoch-wise confidence estimation, trusted/untrusted splitting
/// under the keep-ratio schedule, optional calibration, and partial
/// marginalization of untrusted labels.
pub fn fit(corpus: &Corpus, cfg: &TrainConfig, dev: Option<&Corpus>) -> Result<FitResult, TrainError> {
    validate(corpus)?;
    let mut model = Model::init(corpus);
    let prepared = prepare(&model, corpus);
    let num_sentences = corpus.sentences.len();
    let mut rng = substream(cfg.seed, "shuffle");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut final_records = Vec::new();

    for epoch in 0..cfg.epochs {
        let schedule_epoch = epoch + cfg.epoch_offset;
        let (mut per_sentence, distributions) =
            confidence_pass(&model, &prepared, cfg.strategy)?;

        let mut flat: Vec<ConfidenceRecord> =
            per_sentence.iter().flatten().cloned().collect();
        split_trusted(&mut flat, schedule_epoch, &cfg.schedule);

        // write verdicts back per sentence; flat preserves sentence order
        let mut cursor = 0;
        for records in per_sentence.iter_mut() {
            for record in records.iter_mut() {
                *record = flat[cursor].clone();
                cursor += 1;
            }
        }

        let mut counts = [0usize; 4]; // tp, tn, up, un
        for (s, records) in per_sentence.iter_mut().enumerate() {
            for record in records.iter_mut() {
                match (record.verdict, record.group) {
                    (Verdict::Trusted, Group::Positive) => counts[0] += 1,
                    (Verdict::Trusted, Group::Negative) => counts[1] += 1,
                    (Verdict::Untrusted, Group::Positive) => counts[2] += 1,
                    (Verdict::Untrusted, Group::Negative) => counts[3] += 1,
                }
                if record.verdict == Verdict::Untrusted
                    && record.group == Group::Positive
                    && cfg.calibration_enabled
                {
                    record.calibration = Some(calibrate(
                        record.observed,
                        distributions[s].row(record.token_index),
                        &model.tagset,
                    ));
                }
            }
        }

        let masks: Vec<ConstraintMask> = per_sentence
            .iter()
            .map(|records| build_mask(records, &model.tagset))
            .collect();

        let mut order: Vec<usize> = (0..num_sentences).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let loss = train_epoch(&mut model, &prepared, &masks, cfg, &order, epoch)?;

        let dev_report = match dev {
            Some(d) => Some(model.evaluate(d)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            loss,
            trusted_positive: counts[0],
            trusted_negative: counts[1],
            untrusted_positive: counts[2],
            untrusted_negative: counts[3],
            dev: dev_report,
        });
        if epoch + 1 == cfg.epochs {
            final_records = per_sentence.into_iter().flatten().collect();
        }
    }

    Ok(FitResult {
        model,
        metrics,
        final_records,
    })
}

/// Plain CRF maximum likelihood: every observed label trusted, no confidence
/// machinery. Reference trajectory for the degenerate `tau = 0` case.
pub fn fit_mle(corpus: &Corpus, cfg: &TrainConfig, dev: Option<&Corpus>) -> Result<FitResult, TrainError> {
    validate(corpus)?;
    let mut model = Model::init(corpus);
    let prepared = prepare(&model, corpus);
    let num_labels = model.tagset.len();
    let masks: Vec<ConstraintMask> = prepared
        .observed
        .iter()
        .map(|tags| ConstraintMask::singletons(tags, num_labels))
        .collect();
    let mut rng = substream(cfg.seed, "shuffle");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let loss = train_epoch(&mut model, &prepared, &masks, cfg, &order, epoch)?;
        let dev_report = match dev {
            Some(d) => Some(model.evaluate(d)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            loss,
            trusted_positive: 0,
            trusted_negative: 0,
            untrusted_positive: 0,
            untrusted_negative: 0,
            dev: dev_report,
        });
    }
    Ok(FitResult {
        model,
        metrics,
        final_records: Vec::new(),
    })
}

/// Score a corpus with a trained model and flag the least confident tokens
/// of each group at the schedule's fully annealed keep ratio.
pub fn detect_noise(
    model: &Model,
    corpus: &Corpus,
    strategy: Strategy,
    schedule: &ScheduleConfig,
) -> Result<Vec<ConfidenceRecord>, TrainError> {
    let aligned = crate::corpus::align_to(corpus, &model.tagset)?;
    let corpus = &aligned;
    let prepared = prepare(model, corpus);
    let (per_sentence, distributions) = confidence_pass(model, &prepared, strategy)?;
    let mut flat: Vec<ConfidenceRecord> = per_sentence.into_iter().flatten().collect();
    split_trusted(&mut flat, schedule.warmup_epochs, schedule);
    for record in flat.iter_mut() {
        if record.verdict == Verdict::Untrusted && record.group == Group::Positive {
            // sentence ids are positions in this corpus
            let s = corpus
                .sentences
                .iter()
                .position(|x| x.id == record.sentence_id)
                .expect("record sentence");
            record.calibration = Some(calibrate(
                record.observed,
                distributions[s].row(record.token_index),
                &model.tagset,
            ));
        }
    }
    Ok(flat)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub rounds: usize,
    pub first_round_tau: (f64, f64),
    pub later_tau: (f64, f64),
    pub split_seed: u64,
    /// Restart the keep-ratio schedule at each fit (default). When false the
    /// epoch counter carries across rounds.
    pub reset_schedule: bool,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            rounds: 3,
            first_round_tau: (0.005, 0.15),
            later_tau: (0.005, 0.15),
            split_seed: 0,
            reset_schedule: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub tau_positive: f64,
    pub tau_negative: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub test: Option<PrfReport>,
}

#[derive(Debug, Clone)]
pub struct SelfTrainResult {
    pub model: Model,
    pub rounds: Vec<RoundMetrics>,
    /// The re-annotated training corpus after the last round.
    pub corpus: Corpus,
}

fn subcorpus(corpus: &Corpus, indices: &[usize]) -> Corpus {
    Corpus {
        sentences: indices.iter().map(|&i| corpus.sentences[i].clone()).collect(),
        tagset: corpus.tagset.clone(),
    }
}

/// Cross-validated self-training: each round splits the training set in
/// halves, fits on one half, re-annotates the other with Viterbi, then swaps.
/// The updated training set feeds the next round; a final fit on the full
/// updated set produces the returned model.
pub fn self_train(
    corpus: &Corpus,
    st_cfg: &SelfTrainConfig,
    train_cfg: &TrainConfig,
    test: Option<&Corpus>,
) -> Result<SelfTrainResult, TrainError> {
    validate(corpus)?;
    let mut working = corpus.clone();
    let mut rounds = Vec::with_capacity(st_cfg.rounds);
    let mut epoch_offset = 0usize;

    for round in 0..st_cfg.rounds {
        let (tau_p, tau_n) = if round == 0 {
            st_cfg.first_round_tau
        } else {
            st_cfg.later_tau
        };
        let mut cfg = train_cfg.clone();
        cfg.schedule.tau_positive = tau_p;
        cfg.schedule.tau_negative = tau_n;
        cfg.epoch_offset = epoch_offset;

        let mut indices: Vec<usize> = (0..working.sentences.len()).collect();
        let mut rng = substream(st_cfg.split_seed.wrapping_add(round as u64), "split");
        indices.shuffle(&mut rng);
        let mid = indices.len().div_ceil(2);
        let (half_a, half_b) = indices.split_at(mid);

        let corpus_a = subcorpus(&working, half_a);
        let fit_a = fit(&corpus_a, &cfg, None)?;
        reannotate(&mut working, half_b, &fit_a.model);

        let corpus_b = subcorpus(&working, half_b);
        let fit_b = fit(&corpus_b, &cfg, None)?;
        reannotate(&mut working, half_a, &fit_b.model);

        if !st_cfg.reset_schedule {
            epoch_offset += cfg.epochs;
        }

        let round_fit = fit(&working, &cfg, None)?;
        let test_report = match test {
            Some(t) => Some(round_fit.model.evaluate(t)?),
            None => None,
        };
        rounds.push(RoundMetrics {
            round,
            tau_positive: tau_p,
            tau_negative: tau_n,
            loss_a: fit_a.metrics.last().map(|m| m.loss).unwrap_or(0.0),
            loss_b: fit_b.metrics.last().map(|m| m.loss).unwrap_or(0.0),
            test: test_report,
        });
        if round + 1 == st_cfg.rounds {
            return Ok(SelfTrainResult {
                model: round_fit.model,
                rounds,
                corpus: working,
            });
        }
    }
    unreachable!("rounds >= 1")
}

fn reannotate(corpus: &mut Corpus, indices: &[usize], model: &Model) {
    for &i in indices {
        let sentence = &corpus.sentences[i];
        let feats = model.emission.featurize_sentence(sentence);
        let em = model.emission.scores(&feats);
        let lattice = Lattice::new(em.view(), &model.transitions);
        let (tags, _) = viterbi(&lattice);
        for (token, tag) in corpus.sentences[i].tokens.iter_mut().zip(tags) {
            token.observed = tag;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauSearchResult {
    pub tau_positive: f64,
    pub tau_negative: f64,
    pub fits: usize,
    pub dev_f1: f64,
}

/// Coordinate search over the noise-rate grid: sweep `tau_n` with `tau_p`
/// fixed at its default, then sweep `tau_p` with the best `tau_n`. The two
/// parameters are assumed independent, so the cost is one sweep each
/// (21 + 21 fits on the default grid), not the full product. Ties prefer the
/// smaller value.
pub fn grid_search_tau(
    corpus: &Corpus,
    dev: &Corpus,
    grid: &[f64],
    train_cfg: &TrainConfig,
) -> Result<TauSearchResult, TrainError> {
    let mut fits = 0usize;
    let mut eval = |tau_p: f64, tau_n: f64| -> Result<f64, TrainError> {
        let mut cfg = train_cfg.clone();
        cfg.schedule.tau_positive = tau_p;
        cfg.schedule.tau_negative = tau_n;
        fits += 1;
        let result = fit(corpus, &cfg, None)?;
        Ok(result.model.evaluate(dev)?.overall.f1)
    };

    let default_tau_p = train_cfg.schedule.tau_positive;
    let mut best_tau_n = grid[0];
    let mut best_f1 = f64::NEG_INFINITY;
    for &tau_n in grid {
        let f1 = eval(default_tau_p, tau_n)?;
        if f1 > best_f1 {
            best_f1 = f1;
            best_tau_n = tau_n;
        }
    }
    let mut best_tau_p = grid[0];
    let mut best_f1_p = f64::NEG_INFINITY;
    for &tau_p in grid {
        let f1 = eval(tau_p, best_tau_n)?;
        if f1 > best_f1_p {
            best_f1_p = f1;
            best_tau_p = tau_p;
        }
    }
    Ok(TauSearchResult {
        tau_positive: best_tau_p,
        tau_negative: best_tau_n,
        fits,
        dev_f1: best_f1_p,
    })
}

/// The default search grid: 0.0 to 0.2 in steps of 0.01.
pub fn default_tau_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.01).collect()
}

/// Gold noise ratios from a ledger: noisy positives over all observed
/// positives and noisy negatives over all observed negatives.
pub fn oracle_tau(corpus: &Corpus, ledger: &crate::noise::NoiseLedger) -> (f64, f64) {
    let mut positives = 0usize;
    let mut negatives = 0usize;
    for sentence in &corpus.sentences {
        for token in &sentence.tokens {
            if corpus.tagset.is_positive(token.observed) {
                positives += 1;
            } else {
                negatives += 1;
            }
        }
    }
    let tau_p = if positives == 0 {
        0.0
    } else {
        ledger.noisy_positive.len() as f64 / positives as f64
    };
    let tau_n = if negatives == 0 {
        0.0
    } else {
        ledger.noisy_negative.len() as f64 / negatives as f64
    };
    (tau_p, tau_n)
}
