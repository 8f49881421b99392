//! Command-line front end: dataset preparation, training, evaluation,
//! migration, synthetic data and the variant ablation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::data::{
    build_filter_index, build_snapshots, default_history_length, generate_synthetic, load_dataset, save_dataset,
    DataError, DatasetStats, FilterIndex, SnapshotGraph, Split, SyntheticSpec, TkgDataset,
};
use crate::eval::{evaluate, migrate_eval, write_per_query_csv, EvalError, EvalReport, ModelScorer};
use crate::model::{ModelError, MpsVariant, MsgVariant};
use crate::train::{load_checkpoint, save_checkpoint, Checkpoint, EpochMetrics, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Input(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Validation(_) => CliError::Validation(e.to_string()),
            DataError::Contract(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Validation(_) => CliError::Validation(e.to_string()),
            TrainError::Config(_)
            | TrainError::Checkpoint(_)
            | TrainError::Version { .. }
            | TrainError::Checksum
            | TrainError::Io { .. } => CliError::Input(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(v) => v.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Validation(_) => CliError::Validation(e.to_string()),
            EvalError::Io { .. } => CliError::Input(e.to_string()),
            EvalError::Data(d) => d.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "daemon", version, about = "Path-memory reasoning over temporal knowledge graphs", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, validate and index a dataset, then print its statistics.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        /// Also write the statistics as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Evaluate a checkpoint on the validation and test splits.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        history_length: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Write per-query ranks as CSV next to the reports.
        #[arg(long)]
        per_query: bool,
    },
    /// Evaluate a checkpoint trained on another dataset.
    Migrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation report of a model trained directly on this dataset.
        #[arg(long)]
        direct_report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        history_length: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Write a rule-generated synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        entities: usize,
        #[arg(long, default_value_t = 2)]
        relations: usize,
        #[arg(long, default_value_t = 30)]
        timestamps: usize,
        #[arg(long, default_value_t = 5)]
        facts_per_step: usize,
    },
    /// Train and evaluate every requested message × memory-passing variant.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
}

/// Training flags; every value overrides the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOpts {
    /// Key-value configuration file (`key = value` per line, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub history_length: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Message variant; `ablate` accepts a comma-separated list.
    #[arg(long)]
    pub msg_variant: Option<String>,
    /// Memory passing variant; `ablate` accepts a comma-separated list.
    #[arg(long)]
    pub mps_variant: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Zero wall-clock fields so repeated runs write identical files.
    #[arg(long)]
    pub deterministic: bool,
}

const CONFIG_KEYS: [&str; 13] = [
    "seed",
    "history-length",
    "dim",
    "layers",
    "negatives",
    "alpha",
    "lr",
    "epochs",
    "batch-size",
    "msg-variant",
    "mps-variant",
    "workers",
    "clamp-eps",
];

/// Parses `key = value` lines; keys use the flag spelling, `_` or `-`.
pub fn parse_config_file(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("{origin}:{}: expected `key = value`", n + 1)))?;
        let key = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(CliError::Input(format!(
                "{origin}:{}: unknown key {key:?} (valid: {})",
                n + 1,
                CONFIG_KEYS.join(", ")
            )));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Input(format!("invalid value {value:?} for {key}")))
}

/// Variant lists as given, in order, without duplicates.
fn variant_list<T: std::str::FromStr<Err = ModelError> + PartialEq>(text: &str) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: T = name.parse().map_err(|e: ModelError| CliError::Input(e.to_string()))?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("empty variant list".into()));
    }
    Ok(out)
}

/// Merged settings: defaults, then the config file, then flags.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub train: TrainConfig,
    pub msg_variants: Vec<MsgVariant>,
    pub mps_variants: Vec<MpsVariant>,
}

pub fn resolve(opts: &TrainOpts, data_dir: &Path) -> Result<Resolved, CliError> {
    let mut kv = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
            parse_config_file(&text, &path.display().to_string())?
        }
        None => BTreeMap::new(),
    };
    let mut set = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(key.to_string(), v);
        }
    };
    set("seed", opts.seed.map(|v| v.to_string()));
    set("history-length", opts.history_length.map(|v| v.to_string()));
    set("dim", opts.dim.map(|v| v.to_string()));
    set("layers", opts.layers.map(|v| v.to_string()));
    set("negatives", opts.negatives.map(|v| v.to_string()));
    set("alpha", opts.alpha.map(|v| v.to_string()));
    set("lr", opts.lr.map(|v| v.to_string()));
    set("epochs", opts.epochs.map(|v| v.to_string()));
    set("batch-size", opts.batch_size.map(|v| v.to_string()));
    set("msg-variant", opts.msg_variant.clone());
    set("mps-variant", opts.mps_variant.clone());
    set("workers", opts.workers.map(|v| v.to_string()));

    let mut train = TrainConfig::default();
    if let Some(l) = data_dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(default_history_length)
    {
        train.history_length = l;
    }
    let mut msg_variants = MsgVariant::ALL.to_vec();
    let mut mps_variants = MpsVariant::ALL.to_vec();
    let mut msg_given = false;
    let mut mps_given = false;
    for (key, value) in &kv {
        match key.as_str() {
            "seed" => train.seed = parse_value(key, value)?,
            "history-length" => train.history_length = parse_value(key, value)?,
            "dim" => train.dim = parse_value(key, value)?,
            "layers" => train.layers = parse_value(key, value)?,
            "negatives" => train.negatives = parse_value(key, value)?,
            "alpha" => train.alpha = parse_value(key, value)?,
            "lr" => train.learning_rate = parse_value(key, value)?,
            "epochs" => train.max_epochs = parse_value(key, value)?,
            "batch-size" => train.batch_size = parse_value(key, value)?,
            "workers" => train.workers = parse_value(key, value)?,
            "clamp-eps" => train.clamp_eps = parse_value(key, value)?,
            "msg-variant" => {
                msg_variants = variant_list(value)?;
                msg_given = true;
            }
            "mps-variant" => {
                mps_variants = variant_list(value)?;
                mps_given = true;
            }
            _ => unreachable!("keys are checked on parse"),
        }
    }
    if msg_given {
        train.msg_variant = msg_variants[0];
    }
    if mps_given {
        train.mps_variant = mps_variants[0];
    }
    train.validate().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(Resolved {
        train,
        msg_variants,
        mps_variants,
    })
}

struct Prepared {
    ds: TkgDataset,
    snapshots: Vec<SnapshotGraph>,
    filter: FilterIndex,
}

fn prepare_dataset(dir: &Path) -> Result<Prepared, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Input(format!("dataset directory {} does not exist", dir.display())));
    }
    let mut ds = load_dataset(dir)?;
    if !ds.is_augmented() {
        ds = ds.add_inverse_quadruples()?;
    }
    let snapshots = build_snapshots(&ds, &Split::ALL)?;
    let filter = build_filter_index(&ds)?;
    Ok(Prepared { ds, snapshots, filter })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_checkpoint(path: &Path, ds: &TkgDataset) -> Result<Checkpoint, CliError> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_dataset(ds)?;
    Ok(ckpt)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    data: String,
    config: &'a TrainConfig,
    config_digest: String,
}

/// Runs one training job, streaming per-epoch metrics to `metrics.jsonl`.
fn train_into(prep: &Prepared, config: TrainConfig, out: &Path, deterministic: bool, label: &str) -> Result<(Checkpoint, Vec<EpochMetrics>), CliError> {
    create_dir(out)?;
    let mut trainer = Trainer::new(&prep.ds, config.clone())?;
    let mut lines = String::new();
    let mut log = Vec::new();
    for _ in 0..config.max_epochs {
        let mut m = trainer.run_epoch()?;
        if deterministic {
            m.seconds = 0.0;
        }
        println!(
            "{label}epoch {:>3}  loss {:.5}  valid MRR {:.4}  H@1 {:.4}  H@10 {:.4}",
            m.epoch, m.train_loss, m.valid_mrr, m.valid_hits1, m.valid_hits10
        );
        lines.push_str(&serde_json::to_string(&m).map_err(|e| CliError::Runtime(e.to_string()))?);
        lines.push('\n');
        log.push(m);
    }
    let metrics_path = out.join("metrics.jsonl");
    fs::write(&metrics_path, lines).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", metrics_path.display())))?;
    let best = trainer
        .into_best()
        .ok_or_else(|| CliError::Input("epochs must be at least 1".into()))?;
    save_checkpoint(&best, &out.join("best.ckpt"))?;
    Ok((best, log))
}

fn eval_report(prep: &Prepared, ckpt: &Checkpoint, split: Split, history: Option<usize>, batch: Option<usize>) -> Result<crate::eval::EvalOutcome, CliError> {
    let mut config = ckpt.config.clone();
    if let Some(h) = history {
        config.history_length = h;
    }
    if let Some(b) = batch {
        config.batch_size = b;
    }
    let model = config.model_config();
    let scorer = ModelScorer {
        params: &ckpt.params,
        config: &model,
    };
    Ok(evaluate(&prep.ds, &prep.snapshots, &prep.filter, &scorer, split, &config.eval_options(&prep.ds))?)
}

#[derive(Serialize)]
struct AblationRow {
    msg_variant: MsgVariant,
    mps_variant: MpsVariant,
    best_epoch: usize,
    valid_mrr: f64,
    test: EvalReport,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare { data, out } => {
            let prep = prepare_dataset(&data)?;
            let stats = DatasetStats::compute(&prep.ds);
            print!("{}", stats.to_table());
            println!(
                "snapshots {}  filter keys {}",
                prep.snapshots.len(),
                prep.filter.len()
            );
            for w in prep.ds.warnings() {
                println!("warning: {w}");
            }
            if let Some(out) = out {
                create_dir(&out)?;
                write_json(&out.join("stats.json"), &stats)?;
            }
            Ok(())
        }
        Command::Train { data, out, opts } => {
            let resolved = resolve(&opts, &data)?;
            let prep = prepare_dataset(&data)?;
            let config = resolved.train;
            create_dir(&out)?;
            write_json(
                &out.join("run_config.json"),
                &RunRecord {
                    command: "train",
                    data: data.display().to_string(),
                    config: &config,
                    config_digest: crate::eval::config_digest(&config),
                },
            )?;
            let (best, _) = train_into(&prep, config, &out, opts.deterministic, "")?;
            println!(
                "best valid MRR {:.4} at epoch {}; checkpoint {}",
                best.valid_mrr,
                best.epoch,
                out.join("best.ckpt").display()
            );
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            history_length,
            batch_size,
            per_query,
        } => {
            let prep = prepare_dataset(&data)?;
            let ckpt = read_checkpoint(&checkpoint, &prep.ds)?;
            if let Some(out) = &out {
                create_dir(out)?;
            }
            for split in [Split::Valid, Split::Test] {
                if prep.ds.split(split).is_empty() {
                    continue;
                }
                let outcome = eval_report(&prep, &ckpt, split, history_length, batch_size)?;
                println!("{}", outcome.report.raw.summary());
                println!("{}", outcome.report.filtered.summary());
                if let Some(out) = &out {
                    write_json(&out.join(format!("eval_{}.json", split.name())), &outcome.report)?;
                    if per_query {
                        write_per_query_csv(&outcome.ranks, &out.join(format!("ranks_{}.csv", split.name())))?;
                    }
                }
            }
            Ok(())
        }
        Command::Migrate {
            data,
            checkpoint,
            direct_report,
            out,
            history_length,
            batch_size,
        } => {
            let prep = prepare_dataset(&data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let direct: Option<EvalReport> = match &direct_report {
                Some(p) => {
                    let text = fs::read_to_string(p)
                        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
                    Some(serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            let mut config = ckpt.config.clone();
            if let Some(h) = history_length {
                config.history_length = h;
            }
            if let Some(b) = batch_size {
                config.batch_size = b;
            }
            let opts = config.eval_options(&prep.ds);
            let report = migrate_eval(&ckpt, &prep.ds, &prep.snapshots, &prep.filter, &opts, direct.as_ref())?;
            println!("{}", report.report.raw.summary());
            println!("{}", report.report.filtered.summary());
            if let Some(r) = &report.ratios {
                let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}%", 100.0 * x));
                println!(
                    "migration ratio  MRR {}  H@1 {}  H@3 {}  H@10 {}",
                    pct(r.mrr),
                    pct(r.hits1),
                    pct(r.hits3),
                    pct(r.hits10)
                );
            }
            if let Some(out) = out {
                create_dir(&out)?;
                write_json(&out.join("migration.json"), &report)?;
            }
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            entities,
            relations,
            timestamps,
            facts_per_step,
        } => {
            let spec = SyntheticSpec {
                num_entities: entities,
                num_base_relations: relations,
                num_timestamps: timestamps,
                facts_per_step,
                ..SyntheticSpec::default()
            };
            let ds = generate_synthetic(&spec, seed).map_err(|e| CliError::Input(e.to_string()))?;
            create_dir(&out)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} facts over {} timestamps to {}",
                ds.train.len() + ds.valid.len() + ds.test.len(),
                ds.num_timestamps(),
                out.display()
            );
            Ok(())
        }
        Command::Ablate { data, out, opts } => {
            let resolved = resolve(&opts, &data)?;
            let prep = prepare_dataset(&data)?;
            create_dir(&out)?;
            let mut rows = Vec::new();
            for &mps in &resolved.mps_variants {
                for &msg in &resolved.msg_variants {
                    let config = TrainConfig {
                        msg_variant: msg,
                        mps_variant: mps,
                        ..resolved.train.clone()
                    };
                    let dir = out.join(format!("{mps}_{msg}"));
                    let (best, _) = train_into(&prep, config, &dir, opts.deterministic, &format!("[{mps}/{msg}] "))?;
                    let test = eval_report(&prep, &best, Split::Test, None, None)?;
                    write_json(&dir.join("eval_test.json"), &test.report)?;
                    rows.push(AblationRow {
                        msg_variant: msg,
                        mps_variant: mps,
                        best_epoch: best.epoch,
                        valid_mrr: best.valid_mrr,
                        test: test.report,
                    });
                }
            }
            println!("{:<8} {:<10} {:>9} {:>9} {:>8} {:>8}", "mps", "msg", "valid MRR", "test MRR", "H@1", "H@10");
            for r in &rows {
                println!(
                    "{:<8} {:<10} {:>9.4} {:>9.4} {:>8.4} {:>8.4}",
                    r.mps_variant.name(),
                    r.msg_variant.name(),
                    r.valid_mrr,
                    r.test.filtered.mrr,
                    r.test.filtered.hits1,
                    r.test.filtered.hits10
                );
            }
            write_json(&out.join("ablation.json"), &rows)?;
            Ok(())
        }
    }
}
