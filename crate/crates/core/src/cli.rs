//! Command-line driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::corpus::{default_split, load_dialogre, Corpus, RelationSplit};
use crate::encoder::Backend;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_splits, render_distribution, render_table, EvalReport, Golds};
use crate::inference::{predict_corpus, write_prediction_dump, InferenceMode, PredictionRecord};
use crate::model::Model;
use crate::synthetic::{write_synthetic, SynthSpec};
use crate::trainer::{train, train_multiclass_baseline, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dre", version, about = "Zero-shot dialogue relation extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Validate a DialogRE-format corpus and print a summary.
    Ingest,
    /// Generate a planted-trigger corpus (train, test, split, spec).
    Synth {
        /// Generator spec (JSON); defaults to the 8-seen/4-unseen layout.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and write per-epoch checkpoints plus a manifest.
    Train {
        /// Train the multi-class baseline instead of the binary scorer.
        #[arg(long)]
        baseline: bool,
    },
    /// Score a corpus and write the micro-F1 report.
    Eval,
    /// Write the per-query prediction dump.
    Predict,
    /// Render per-query case cards and the correct-prediction distribution.
    Analyze {
        /// Only these query ids.
        #[arg(long = "query")]
        queries: Vec<String>,
        /// Maximum number of cards.
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Only queries whose top-1 prediction is wrong.
        #[arg(long)]
        failures: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PredictedTrigger,
    GeneralEmbedding,
    GoldTrigger,
}

impl From<ModeArg> for InferenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PredictedTrigger => InferenceMode::PredictedTrigger,
            ModeArg::GeneralEmbedding => InferenceMode::GeneralEmbedding,
            ModeArg::GoldTrigger => InferenceMode::GoldTrigger,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Pretrained,
    Tiny,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// JSON file of flat dotted keys; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub split: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    /// Model directory for the pretrained backend.
    #[arg(long, global = true)]
    pub pretrained_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub negatives: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub corpus: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: InferenceMode,
    pub k: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

const CONFIG_KEYS: [&str; 21] = [
    "corpus",
    "split",
    "checkpoint",
    "out",
    "mode",
    "k",
    "seed",
    "backend",
    "pretrained_dir",
    "negatives",
    "lambda",
    "epochs",
    "lr",
    "batch_size",
    "max_span_len",
    "max_sequence_length",
    "dropout",
    "tiny.hidden_dim",
    "tiny.num_layers",
    "tiny.num_heads",
    "tiny.intermediate_dim",
];

struct FileConfig(BTreeMap<String, Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(BTreeMap::new()));
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, Value> = serde_json::from_str(&text)?;
        if let Some(k) = map
            .keys()
            .find(|k| !CONFIG_KEYS.contains(&k.as_str()) && k.as_str() != "tiny.init_std")
        {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        Ok(Self(map))
    }

    fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("config key `{key}`: {e}"))))
            .transpose()
    }
}

impl RunConfig {
    pub fn resolve(command: Command, opts: Opts) -> Result<Self> {
        let file = FileConfig::load(opts.config.as_deref())?;
        let path = |flag: Option<PathBuf>, key: &str| -> Result<Option<PathBuf>> {
            Ok(flag.or(file.get::<PathBuf>(key)?))
        };
        let mode = match opts.mode {
            Some(m) => m.into(),
            None => match file.get::<String>("mode")? {
                Some(s) => s.parse()?,
                None => InferenceMode::GeneralEmbedding,
            },
        };
        let backend = match opts.backend {
            Some(BackendArg::Tiny) => Backend::Tiny,
            Some(BackendArg::Pretrained) => Backend::Pretrained,
            None => match file.get::<String>("backend")?.as_deref() {
                None | Some("tiny") => Backend::Tiny,
                Some("pretrained") => Backend::Pretrained,
                Some(other) => return Err(Error::Config(format!("unknown backend `{other}`"))),
            },
        };
        let pretrained_dir = path(opts.pretrained_dir, "pretrained_dir")?;
        let mut train = match backend {
            Backend::Tiny => TrainConfig::tiny(),
            Backend::Pretrained => TrainConfig {
                pretrained_dir: None,
                ..TrainConfig::pretrained("")
            },
        };
        train.pretrained_dir = pretrained_dir;
        let seed = opts.seed.or(file.get("seed")?).unwrap_or(0);
        train.seed = seed;
        macro_rules! set {
            ($field:expr, $flag:expr, $key:literal) => {
                if let Some(v) = $flag.or(file.get($key)?) {
                    $field = v;
                }
            };
        }
        set!(train.negatives_k, opts.negatives, "negatives");
        set!(train.loss_weight_lambda, opts.lambda, "lambda");
        set!(train.epochs, opts.epochs, "epochs");
        set!(train.learning_rate, opts.lr, "lr");
        set!(train.batch_size, opts.batch_size, "batch_size");
        set!(train.max_span_len, None, "max_span_len");
        set!(train.max_sequence_length, None, "max_sequence_length");
        set!(train.dropout, None, "dropout");
        set!(train.tiny.hidden_dim, None, "tiny.hidden_dim");
        set!(train.tiny.num_layers, None, "tiny.num_layers");
        set!(train.tiny.num_heads, None, "tiny.num_heads");
        set!(train.tiny.intermediate_dim, None, "tiny.intermediate_dim");
        set!(train.tiny.init_std, None, "tiny.init_std");

        let k = opts.k.or(file.get("k")?).unwrap_or(2);
        Ok(Self {
            corpus: path(opts.corpus, "corpus")?,
            split: path(opts.split, "split")?,
            checkpoint: path(opts.checkpoint, "checkpoint")?,
            out: path(opts.out, "out")?,
            mode,
            k,
            seed,
            train,
            command,
        })
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path> {
    let p = value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{command}` requires --{flag}")))?;
    Ok(p)
}

fn existing<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path> {
    let p = required(value, flag, command)?;
    if !p.exists() {
        return Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    Ok(p)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_split(config: &RunConfig) -> Result<RelationSplit> {
    match &config.split {
        Some(p) => RelationSplit::load(p),
        None => Ok(default_split()),
    }
}

fn load_model(config: &RunConfig, command: &str) -> Result<Model> {
    let mut model = checkpoint::load(existing(&config.checkpoint, "checkpoint", command)?)?;
    if let Some(p) = &config.split {
        model.split = RelationSplit::load(p)?;
    }
    Ok(model)
}

/// Executes one command and returns the text for standard output.
pub fn run(config: &RunConfig) -> Result<String> {
    match &config.command {
        Command::Ingest => ingest(config),
        Command::Synth { spec } => synth(config, spec.as_deref()),
        Command::Train { baseline } => run_train(config, *baseline),
        Command::Eval => eval(config),
        Command::Predict => predict(config),
        Command::Analyze {
            queries,
            limit,
            failures,
        } => analyze(config, queries, *limit, *failures),
    }
}

fn ingest(config: &RunConfig) -> Result<String> {
    let corpus = load_dialogre(existing(&config.corpus, "corpus", "ingest")?)?;
    let split = load_split(config)?;
    let mut seen_pairs = 0;
    let mut unseen_pairs = 0;
    let mut straddling = 0;
    let mut outside = BTreeSet::new();
    for inst in &corpus.instances {
        let s = inst.relations.iter().any(|r| split.seen.contains(r));
        let u = inst.relations.iter().any(|r| split.unseen.contains(r));
        seen_pairs += s as usize;
        unseen_pairs += u as usize;
        straddling += (s && u) as usize;
        outside.extend(inst.relations.iter().filter(|r| !split.contains(r)).cloned());
    }
    let summary = json!({
        "dialogues": corpus.dialogues.len(),
        "pairs": corpus.instances.len(),
        "relations": corpus.relation_counts(),
        "pairs_with_seen_relation": seen_pairs,
        "pairs_with_unseen_relation": unseen_pairs,
        "straddling_pairs": straddling,
        "relations_outside_split": outside,
        "triggerless_pairs": corpus.instances.iter().filter(|i| i.first_trigger().is_none()).count(),
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    if let Some(out) = &config.out {
        write_out(out, &text)?;
    }
    Ok(text)
}

fn synth(config: &RunConfig, spec_path: Option<&Path>) -> Result<String> {
    let dir = required(&config.out, "out", "synth")?;
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => SynthSpec::acceptance(config.seed),
    };
    let generated = write_synthetic(dir, &spec)?;
    Ok(format!(
        "wrote {} dialogues ({} seen, {} unseen relations) to {}\n",
        generated.corpus.dialogues.len(),
        generated.split.seen.len(),
        generated.split.unseen.len(),
        dir.display()
    ))
}

fn run_train(config: &RunConfig, baseline: bool) -> Result<String> {
    let corpus = load_dialogre(existing(&config.corpus, "corpus", "train")?)?;
    let split = load_split(config)?;
    let dir = required(&config.out, "out", "train")?;
    let run = if baseline {
        train_multiclass_baseline(&corpus, &split, &config.train, Some(dir))?
    } else {
        train(&corpus, &split, &config.train, Some(dir))?
    };
    let mut out = String::new();
    for e in &run.manifest.epochs {
        let _ = writeln!(
            out,
            "epoch {:>3}  trigger {:.6}  binary {:.6}  total {:.6}",
            e.epoch, e.mean.trigger, e.mean.binary, e.mean.total
        );
    }
    let _ = writeln!(out, "checkpoint {}", dir.join("model.safetensors").display());
    Ok(out)
}

fn golds_of(records: &[PredictionRecord]) -> Golds {
    records
        .iter()
        .map(|r| (r.query_id.clone(), r.gold_relations.iter().cloned().collect()))
        .collect()
}

fn score_corpus(config: &RunConfig, command: &str) -> Result<(Model, Corpus, Vec<PredictionRecord>)> {
    let model = load_model(config, command)?;
    let corpus = load_dialogre(existing(&config.corpus, "corpus", command)?)?;
    let candidates = model.split.all();
    let records = predict_corpus(&model, &corpus, &candidates, config.mode, config.k)?;
    Ok((model, corpus, records))
}

fn report_of(model: &Model, records: &[PredictionRecord]) -> Result<EvalReport> {
    let ranked: Vec<_> = records.iter().map(PredictionRecord::ranked).collect();
    evaluate_splits(&ranked, &golds_of(records), &model.split)
}

fn eval(config: &RunConfig) -> Result<String> {
    if !(1..=2).contains(&config.k) {
        return Err(Error::Config(format!("eval supports k in {{1, 2}}, got {}", config.k)));
    }
    let (model, _, records) = score_corpus(config, "eval")?;
    let report = report_of(&model, &records)?;
    let text = render_table(&[(config.mode.to_string(), &report)]);
    if let Some(dir) = &config.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_out(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        write_out(&dir.join("report.txt"), &text)?;
        write_prediction_dump(&dir.join("predictions.jsonl"), &records)?;
    }
    Ok(text)
}

fn predict(config: &RunConfig) -> Result<String> {
    let (_, _, records) = score_corpus(config, "predict")?;
    match &config.out {
        Some(path) => {
            write_prediction_dump(path, &records)?;
            Ok(format!("wrote {} predictions to {}\n", records.len(), path.display()))
        }
        None => {
            let mut out = String::new();
            for r in &records {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
            Ok(out)
        }
    }
}

/// One case card: dialogue, pair, triggers and relations.
pub fn render_card(corpus: &Corpus, record: &PredictionRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Query {} (dialogue {})", record.query_id, record.dialogue_id);
    if let Some(d) = corpus.dialogue(&record.dialogue_id) {
        for t in &d.turns {
            let _ = writeln!(out, "  {t}");
        }
    }
    let top = record.candidates.first();
    let or_none = |s: Option<&str>| match s {
        Some(t) if !t.is_empty() => t.to_string(),
        _ => "(none)".to_string(),
    };
    let _ = writeln!(out, "Subject: {}    Object: {}", record.subject, record.object);
    let _ = writeln!(out, "Gold trigger: {}", or_none(record.gold_trigger.as_deref()));
    let predicted_trigger = match top.and_then(|s| s.span) {
        Some(_) => or_none(top.and_then(|s| s.span_text.as_deref())),
        None => "(not predicted in this mode)".to_string(),
    };
    let _ = writeln!(out, "Predicted trigger: {predicted_trigger}");
    let _ = writeln!(out, "Gold relation: {}", record.gold_relations.join(", "));
    match top {
        Some(s) => {
            let _ = writeln!(out, "Predicted relation: {} ({:.4})", s.relation_id, s.probability);
        }
        None => {
            let _ = writeln!(out, "Predicted relation: (none)");
        }
    }
    out
}

fn analyze(config: &RunConfig, queries: &[String], limit: usize, failures: bool) -> Result<String> {
    let (model, corpus, records) = score_corpus(config, "analyze")?;
    let report = report_of(&model, &records)?;
    let mut out = String::new();
    let selected = records
        .iter()
        .filter(|r| queries.is_empty() || queries.contains(&r.query_id))
        .filter(|r| {
            !failures
                || r.candidates
                    .first()
                    .is_none_or(|s| !r.gold_relations.contains(&s.relation_id))
        })
        .take(limit);
    for r in selected {
        out.push_str(&render_card(&corpus, r));
        out.push('\n');
    }
    out.push_str(&render_distribution(&report));
    if let Some(path) = &config.out {
        write_out(path, &out)?;
    }
    Ok(out)
}

/// Single-line JSON error record.
pub fn error_record(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}
