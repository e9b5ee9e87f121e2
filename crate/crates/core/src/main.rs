//! Command-line entry point: perturbation, training, self-training,
//! prediction, evaluation, noise detection, and the noise-rate search.
//!
//! Every command echoes its fully resolved configuration at the top of its
//! JSON output so runs are reproducible and diffable. Defaults may come from
//! a JSON config file with flat dotted keys (`--config`, or the
//! `NOISYNER_CONFIG` env var); command-line flags win over file values.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use noisyner::confidence::{ScheduleConfig, Strategy, Verdict};
use noisyner::corpus::{parse_conll, serialize_conll, Corpus};
use noisyner::noise::{self, NoiseLedger, PerturbationConfig};
use noisyner::trainer::{
    self, default_tau_grid, substream, Checkpoint, Model, SelfTrainConfig, TrainConfig,
};
use noisyner::{LatticeError, TrainError};

#[derive(Parser)]
#[command(name = "noisyner", version, about = "CRF sequence tagger for noisy NER annotations")]
struct Cli {
    /// JSON config file with flat dotted keys (flags override it)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Perturb a gold corpus to a target entity recall and precision
    Perturb(PerturbArgs),
    /// Train a tagger with confidence-aware partial marginalization
    Train(TrainArgs),
    /// Cross-validated self-training
    Selftrain(SelftrainArgs),
    /// Viterbi-annotate a corpus with a trained checkpoint
    Predict(PredictArgs),
    /// Entity P/R/F1 of a checkpoint against a reference corpus
    Eval(EvalArgs),
    /// Flag low-confidence tokens and score them against a noise ledger
    DetectNoise(DetectNoiseArgs),
    /// Coordinate search of the noise rates on a dev set
    SearchTau(SearchTauArgs),
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Ledger sidecar path (defaults to <output>.ledger.json)
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long)]
    target_recall: Option<f64>,
    #[arg(long)]
    target_precision: Option<f64>,
    #[arg(long)]
    max_span_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Remove single occurrences instead of whole entity identities
    #[arg(long)]
    occurrence_level: bool,
    /// Comma-separated recall levels; emits one corpus per level
    #[arg(long)]
    sweep_recall: Option<String>,
}

#[derive(Args, Clone)]
struct TrainCommon {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch metrics as JSON lines
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// local | global
    #[arg(long)]
    strategy: Option<String>,
    /// explicit | oracle | searched
    #[arg(long)]
    tau_mode: Option<String>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    tau_n: Option<f64>,
    /// Ledger file for oracle tau
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// on | off
    #[arg(long)]
    calibration: Option<String>,
    #[arg(long)]
    no_shuffle: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Args)]
struct SelftrainArgs {
    #[command(flatten)]
    common: TrainCommon,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    later_tau_p: Option<f64>,
    #[arg(long)]
    later_tau_n: Option<f64>,
    #[arg(long)]
    no_reset_schedule: bool,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct DetectNoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    /// ConfidenceRecord dump as JSON lines
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    tau_n: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
}

#[derive(Args)]
struct SearchTauArgs {
    #[command(flatten)]
    common: TrainCommon,
}

/// Error carrying the process exit code: 1 usage/config, 2 data, 3 numerical.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
    fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
    fn numerical(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Lattice(_) => {
                CliError::numerical(e.to_string())
            }
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<LatticeError> for CliError {
    fn from(e: LatticeError) -> Self {
        CliError::numerical(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Flat dotted-key JSON defaults loaded from the config file.
#[derive(Default)]
struct FileConfig {
    map: serde_json::Map<String, Value>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let path = match path {
            Some(p) => p.to_path_buf(),
            None => match std::env::var_os("NOISYNER_CONFIG") {
                Some(p) => PathBuf::from(p),
                None => return Ok(FileConfig::default()),
            },
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        match value {
            Value::Object(map) => Ok(FileConfig { map }),
            _ => Err(CliError::usage(format!(
                "config {}: top level must be a JSON object",
                path.display()
            ))),
        }
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.map.get(key).and_then(Value::as_f64)
    }
    fn u64(&self, key: &str) -> Option<u64> {
        self.map.get(key).and_then(Value::as_u64)
    }
    fn usize(&self, key: &str) -> Option<usize> {
        self.u64(key).map(|v| v as usize)
    }
    fn string(&self, key: &str) -> Option<String> {
        self.map.get(key).and_then(Value::as_str).map(String::from)
    }
}

fn read_corpus(path: &Path) -> CliResult<Corpus> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    parse_conll(&text, 0, 1).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_ledger(path: &Path) -> CliResult<NoiseLedger> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if ckpt.version != trainer::CHECKPOINT_VERSION {
        return Err(CliError::data(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            ckpt.version
        )));
    }
    Ok(ckpt)
}

fn parse_strategy(s: &str) -> CliResult<Strategy> {
    match s {
        "local" => Ok(Strategy::Local),
        "global" => Ok(Strategy::Global),
        other => Err(CliError::usage(format!("unknown strategy `{other}` (local|global)"))),
    }
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Local => "local",
        Strategy::Global => "global",
    }
}

fn fingerprint(config: &Value) -> String {
    // stable because serde_json::Map preserves insertion order and we build
    // the echo deterministically
    format!("{:016x}", fnv1a(config.to_string().as_bytes()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn record_to_json(r: &noisyner::confidence::ConfidenceRecord, model: &Model) -> Value {
    json!({
        "sentence_id": r.sentence_id,
        "token_index": r.token_index,
        "observed": model.tagset.tag_str(r.observed),
        "score": r.score,
        "group": match r.group { noisyner::confidence::Group::Positive => "p", _ => "n" },
        "verdict": match r.verdict { Verdict::Trusted => "trusted", Verdict::Untrusted => "untrusted" },
        "calibration": r.calibration.map(|c| json!({
            "s_position": c.s_position,
            "s_type": c.s_type,
            "kept_part": match c.kept_part {
                noisyner::confidence::LabelPart::Position => "position",
                noisyner::confidence::LabelPart::Type => "type",
            },
        })),
    })
}

fn cmd_perturb(args: &PerturbArgs, file_cfg: &FileConfig) -> CliResult<Value> {
    let cfg = PerturbationConfig {
        target_recall: args
            .target_recall
            .or(file_cfg.f64("perturb.target_recall"))
            .unwrap_or(0.5),
        target_precision: args
            .target_precision
            .or(file_cfg.f64("perturb.target_precision"))
            .unwrap_or(0.9),
        seed: args.seed.or(file_cfg.u64("seed")).unwrap_or(0),
        max_spurious_span_len: args
            .max_span_len
            .or(file_cfg.usize("perturb.max_span_len"))
            .unwrap_or(3),
        occurrence_level: args.occurrence_level,
    };
    let recall_levels: Vec<f64> = match &args.sweep_recall {
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::usage(format!("bad recall level `{x}`")))
            })
            .collect::<CliResult<Vec<f64>>>()?,
        None => vec![cfg.target_recall],
    };

    let mut corpus = read_corpus(&args.input)?;
    corpus.adopt_observed_as_gold();

    let echo = json!({
        "command": "perturb",
        "input": args.input.display().to_string(),
        "output": args.output.display().to_string(),
        "target_recall": cfg.target_recall,
        "target_precision": cfg.target_precision,
        "recall_levels": recall_levels,
        "max_span_len": cfg.max_spurious_span_len,
        "occurrence_level": cfg.occurrence_level,
        "seed": cfg.seed,
    });

    let mut outputs = Vec::new();
    for &level in &recall_levels {
        let mut level_cfg = cfg.clone();
        level_cfg.target_recall = level;
        let mut rng = substream(cfg.seed, "perturb");
        let (perturbed, ledger) = noise::perturb(&corpus, &level_cfg, &mut rng)
            .map_err(|e| CliError::data(e.to_string()))?;
        let (recall, precision) =
            noise::observed_quality(&perturbed).map_err(|e| CliError::data(e.to_string()))?;

        let (out_path, ledger_path) = if recall_levels.len() == 1 {
            (
                args.output.clone(),
                args.ledger
                    .clone()
                    .unwrap_or_else(|| sidecar(&args.output, "ledger.json")),
            )
        } else {
            let tagged = suffixed(&args.output, &format!("r{:02}", (level * 100.0).round() as u32));
            let ledger = sidecar(&tagged, "ledger.json");
            (tagged, ledger)
        };
        write_file(&out_path, &serialize_conll(&perturbed))?;
        write_file(
            &ledger_path,
            &serde_json::to_string_pretty(&ledger).expect("ledger json"),
        )?;
        outputs.push(json!({
            "target_recall": level,
            "corpus": out_path.display().to_string(),
            "ledger": ledger_path.display().to_string(),
            "achieved_recall": recall,
            "achieved_precision": precision,
            "removed_entities": ledger.removed_entities.len(),
            "spurious_spans": ledger.spurious_spans.len(),
        }));
    }
    Ok(json!({ "config": echo, "result": outputs }))
}

/// Resolve common training settings; returns the config plus its echo.
fn resolve_train(
    common: &TrainCommon,
    file_cfg: &FileConfig,
    corpus: &Corpus,
) -> CliResult<(TrainConfig, Value)> {
    let strategy = parse_strategy(
        &common
            .strategy
            .clone()
            .or(file_cfg.string("train.strategy"))
            .unwrap_or_else(|| "global".to_string()),
    )?;
    let tau_mode = common
        .tau_mode
        .clone()
        .or(file_cfg.string("train.tau_mode"))
        .unwrap_or_else(|| "explicit".to_string());
    let mut tau_p = common
        .tau_p
        .or(file_cfg.f64("train.tau_p"))
        .unwrap_or(0.005);
    let mut tau_n = common
        .tau_n
        .or(file_cfg.f64("train.tau_n"))
        .unwrap_or(0.15);
    let calibration_enabled = match common
        .calibration
        .clone()
        .or(file_cfg.string("train.calibration"))
        .unwrap_or_else(|| "on".to_string())
        .as_str()
    {
        "on" => true,
        "off" => false,
        other => return Err(CliError::usage(format!("calibration must be on|off, got `{other}`"))),
    };

    let mut cfg = TrainConfig {
        epochs: common.epochs.or(file_cfg.usize("train.epochs")).unwrap_or(10),
        learning_rate: common
            .learning_rate
            .or(file_cfg.f64("train.learning_rate"))
            .unwrap_or(0.01),
        l2_penalty: common.l2.or(file_cfg.f64("train.l2")).unwrap_or(1e-4),
        batch_size: common
            .batch_size
            .or(file_cfg.usize("train.batch_size"))
            .unwrap_or(8),
        seed: common.seed.or(file_cfg.u64("seed")).unwrap_or(0),
        strategy,
        schedule: ScheduleConfig {
            tau_positive: tau_p,
            tau_negative: tau_n,
            warmup_epochs: common
                .warmup_epochs
                .or(file_cfg.usize("train.warmup_epochs"))
                .unwrap_or(5),
        },
        calibration_enabled,
        shuffle: !common.no_shuffle,
        epoch_offset: 0,
    };

    match tau_mode.as_str() {
        "explicit" => {}
        "oracle" => {
            let ledger_path = common
                .ledger
                .as_ref()
                .ok_or_else(|| CliError::usage("--tau-mode oracle requires --ledger"))?;
            let ledger = read_ledger(ledger_path)?;
            let (p, n) = trainer::oracle_tau(corpus, &ledger);
            tau_p = p;
            tau_n = n;
        }
        "searched" => {
            let dev_path = common
                .dev
                .as_ref()
                .ok_or_else(|| CliError::usage("--tau-mode searched requires --dev"))?;
            let dev = read_corpus(dev_path)?;
            let search = trainer::grid_search_tau(corpus, &dev, &default_tau_grid(), &cfg)?;
            tau_p = search.tau_positive;
            tau_n = search.tau_negative;
        }
        other => {
            return Err(CliError::usage(format!(
                "tau mode must be explicit|oracle|searched, got `{other}`"
            )))
        }
    }
    cfg.schedule.tau_positive = tau_p;
    cfg.schedule.tau_negative = tau_n;

    let echo = json!({
        "input": common.input.display().to_string(),
        "strategy": strategy_name(cfg.strategy),
        "tau_mode": tau_mode,
        "tau_p": cfg.schedule.tau_positive,
        "tau_n": cfg.schedule.tau_negative,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "l2": cfg.l2_penalty,
        "batch_size": cfg.batch_size,
        "warmup_epochs": cfg.schedule.warmup_epochs,
        "calibration": if cfg.calibration_enabled { "on" } else { "off" },
        "shuffle": cfg.shuffle,
        "seed": cfg.seed,
    });
    Ok((cfg, echo))
}

fn write_metrics(path: Option<&PathBuf>, lines: &[Value]) -> CliResult<()> {
    if let Some(path) = path {
        let mut text = String::new();
        for line in lines {
            text.push_str(&line.to_string());
            text.push('\n');
        }
        write_file(path, &text)?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, file_cfg: &FileConfig) -> CliResult<Value> {
    let corpus = read_corpus(&args.common.input)?;
    let (cfg, mut echo) = resolve_train(&args.common, file_cfg, &corpus)?;
    echo["command"] = json!("train");
    let dev = match &args.common.dev {
        Some(p) => Some(read_corpus(p)?),
        None => None,
    };
    let result = trainer::fit(&corpus, &cfg, dev.as_ref())?;

    let metric_lines: Vec<Value> = result
        .metrics
        .iter()
        .map(|m| {
            json!({
                "epoch": m.epoch,
                "loss": m.loss,
                "trusted_p": m.trusted_positive,
                "trusted_n": m.trusted_negative,
                "dev_p": m.dev.as_ref().map(|d| d.overall.precision),
                "dev_r": m.dev.as_ref().map(|d| d.overall.recall),
                "dev_f1": m.dev.as_ref().map(|d| d.overall.f1),
            })
        })
        .collect();
    write_metrics(args.common.metrics.as_ref(), &metric_lines)?;

    if let Some(path) = &args.common.checkpoint {
        let ckpt = Checkpoint::new(result.model.clone(), fingerprint(&echo), 0, cfg.epochs);
        write_file(path, &serde_json::to_string(&ckpt).expect("checkpoint json"))?;
    }
    let final_loss = result.metrics.last().map(|m| m.loss);
    let final_dev = result
        .metrics
        .last()
        .and_then(|m| m.dev.as_ref())
        .map(|d| d.overall.f1);
    Ok(json!({
        "config": echo,
        "result": {
            "epochs": result.metrics.len(),
            "final_loss": final_loss,
            "final_dev_f1": final_dev,
            "checkpoint": args.common.checkpoint.as_ref().map(|p| p.display().to_string()),
        },
        "metrics": metric_lines,
    }))
}

fn cmd_selftrain(args: &SelftrainArgs, file_cfg: &FileConfig) -> CliResult<Value> {
    let corpus = read_corpus(&args.common.input)?;
    let (cfg, mut echo) = resolve_train(&args.common, file_cfg, &corpus)?;
    echo["command"] = json!("selftrain");
    let st_cfg = SelfTrainConfig {
        rounds: args.rounds.or(file_cfg.usize("selftrain.rounds")).unwrap_or(3),
        first_round_tau: (cfg.schedule.tau_positive, cfg.schedule.tau_negative),
        later_tau: (
            args.later_tau_p
                .or(file_cfg.f64("selftrain.later_tau_p"))
                .unwrap_or(0.005),
            args.later_tau_n
                .or(file_cfg.f64("selftrain.later_tau_n"))
                .unwrap_or(0.15),
        ),
        split_seed: args
            .split_seed
            .or(file_cfg.u64("selftrain.split_seed"))
            .unwrap_or(cfg.seed),
        reset_schedule: !args.no_reset_schedule,
    };
    echo["rounds"] = json!(st_cfg.rounds);
    echo["later_tau_p"] = json!(st_cfg.later_tau.0);
    echo["later_tau_n"] = json!(st_cfg.later_tau.1);
    echo["split_seed"] = json!(st_cfg.split_seed);
    echo["reset_schedule"] = json!(st_cfg.reset_schedule);

    let test = match &args.test {
        Some(p) => Some(read_corpus(p)?),
        None => None,
    };
    let result = trainer::self_train(&corpus, &st_cfg, &cfg, test.as_ref())?;

    let metric_lines: Vec<Value> = result
        .rounds
        .iter()
        .map(|r| {
            json!({
                "round": r.round,
                "tau_p": r.tau_positive,
                "tau_n": r.tau_negative,
                "loss_a": r.loss_a,
                "loss_b": r.loss_b,
                "test_p": r.test.as_ref().map(|t| t.overall.precision),
                "test_r": r.test.as_ref().map(|t| t.overall.recall),
                "test_f1": r.test.as_ref().map(|t| t.overall.f1),
            })
        })
        .collect();
    write_metrics(args.common.metrics.as_ref(), &metric_lines)?;

    if let Some(path) = &args.common.checkpoint {
        let ckpt = Checkpoint::new(
            result.model.clone(),
            fingerprint(&echo),
            st_cfg.rounds,
            cfg.epochs,
        );
        write_file(path, &serde_json::to_string(&ckpt).expect("checkpoint json"))?;
    }
    Ok(json!({
        "config": echo,
        "result": {
            "rounds": metric_lines,
            "checkpoint": args.common.checkpoint.as_ref().map(|p| p.display().to_string()),
        },
    }))
}

fn cmd_predict(args: &PredictArgs) -> CliResult<Value> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let corpus = read_corpus(&args.input)?;
    let pred = ckpt.model.predict(&corpus);
    let mut out = corpus.clone();
    out.tagset = ckpt.model.tagset.clone();
    for (sentence, tags) in out.sentences.iter_mut().zip(pred) {
        for (token, tag) in sentence.tokens.iter_mut().zip(tags) {
            token.observed = tag;
        }
    }
    write_file(&args.output, &serialize_conll(&out))?;
    let echo = json!({
        "command": "predict",
        "checkpoint": args.checkpoint.display().to_string(),
        "input": args.input.display().to_string(),
        "output": args.output.display().to_string(),
    });
    Ok(json!({ "config": echo, "result": { "sentences": out.sentences.len() } }))
}

fn cmd_eval(args: &EvalArgs) -> CliResult<Value> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let corpus = read_corpus(&args.input)?;
    let report = ckpt.model.evaluate(&corpus)?;
    let echo = json!({
        "command": "eval",
        "checkpoint": args.checkpoint.display().to_string(),
        "input": args.input.display().to_string(),
    });
    Ok(json!({ "config": echo, "result": report }))
}

fn cmd_detect_noise(args: &DetectNoiseArgs, file_cfg: &FileConfig) -> CliResult<Value> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let corpus = read_corpus(&args.input)?;
    let ledger = read_ledger(&args.ledger)?;
    let strategy = parse_strategy(
        &args
            .strategy
            .clone()
            .or(file_cfg.string("train.strategy"))
            .unwrap_or_else(|| "global".to_string()),
    )?;
    let schedule = ScheduleConfig {
        tau_positive: args.tau_p.or(file_cfg.f64("train.tau_p")).unwrap_or(0.005),
        tau_negative: args.tau_n.or(file_cfg.f64("train.tau_n")).unwrap_or(0.15),
        warmup_epochs: args
            .warmup_epochs
            .or(file_cfg.usize("train.warmup_epochs"))
            .unwrap_or(5),
    };
    let records = trainer::detect_noise(&ckpt.model, &corpus, strategy, &schedule)?;
    let flags: BTreeSet<(usize, usize)> = records
        .iter()
        .filter(|r| r.verdict == Verdict::Untrusted)
        .map(|r| (r.sentence_id, r.token_index))
        .collect();
    let prf = noise::score_noise_detection(&flags, &ledger);

    if let Some(path) = &args.records {
        let lines: Vec<Value> = records.iter().map(|r| record_to_json(r, &ckpt.model)).collect();
        write_metrics(Some(path), &lines)?;
    }
    let echo = json!({
        "command": "detect-noise",
        "checkpoint": args.checkpoint.display().to_string(),
        "input": args.input.display().to_string(),
        "ledger": args.ledger.display().to_string(),
        "strategy": strategy_name(strategy),
        "tau_p": schedule.tau_positive,
        "tau_n": schedule.tau_negative,
        "warmup_epochs": schedule.warmup_epochs,
    });
    Ok(json!({
        "config": echo,
        "result": {
            "precision": prf.precision,
            "recall": prf.recall,
            "f1": prf.f1,
            "flagged": flags.len(),
            "ledger_noisy": ledger.noisy_tokens().len(),
        },
    }))
}

fn cmd_search_tau(args: &SearchTauArgs, file_cfg: &FileConfig) -> CliResult<Value> {
    let corpus = read_corpus(&args.common.input)?;
    let dev_path = args
        .common
        .dev
        .as_ref()
        .ok_or_else(|| CliError::usage("search-tau requires --dev"))?;
    let dev = read_corpus(dev_path)?;
    let (cfg, mut echo) = resolve_train(&args.common, file_cfg, &corpus)?;
    echo["command"] = json!("search-tau");
    let result = trainer::grid_search_tau(&corpus, &dev, &default_tau_grid(), &cfg)?;
    Ok(json!({
        "config": echo,
        "result": {
            "tau_p": result.tau_positive,
            "tau_n": result.tau_negative,
            "fits": result.fits,
            "dev_f1": result.dev_f1,
        },
    }))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str());
    let name = match ext {
        Some(e) => format!("{stem}_{tag}.{e}"),
        None => format!("{stem}_{tag}"),
    };
    path.with_file_name(name)
}

fn run() -> CliResult<Value> {
    let cli = Cli::try_parse().map_err(|e| {
        // let clap print its own help/version text
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            print!("{e}");
            CliError { code: 0, message: String::new() }
        } else {
            CliError::usage(e.to_string())
        }
    })?;
    let file_cfg = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Perturb(args) => cmd_perturb(args, &file_cfg),
        Command::Train(args) => cmd_train(args, &file_cfg),
        Command::Selftrain(args) => cmd_selftrain(args, &file_cfg),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DetectNoise(args) => cmd_detect_noise(args, &file_cfg),
        Command::SearchTau(args) => cmd_search_tau(args, &file_cfg),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(output) => {
            println!("{}", serde_json::to_string_pretty(&output).expect("json output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
