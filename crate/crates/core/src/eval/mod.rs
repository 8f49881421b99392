//! Ranking metrics under the raw and time-aware filtered settings, and the
//! migration protocol for checkpoints moved between datasets.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{history_window, DataError, FilterIndex, Quadruple, SnapshotGraph, Split, TkgDataset};
use crate::diffcore::DenseArray;
use crate::model::{forward, score, ModelConfig, ModelError, ModelParams, Query, QueryBatch};
use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Rank of `target` among `scores` with ties counted as half.
///
/// Entities in `filter` other than the target itself are removed from the
/// competition.
pub fn rank_target(scores: &[f64], target: usize, filter: &[usize]) -> Result<f64, EvalError> {
    if target >= scores.len() {
        return Err(EvalError::Contract(format!(
            "target {target} out of range for {} candidates",
            scores.len()
        )));
    }
    let t = scores[target];
    if !t.is_finite() {
        return Err(EvalError::Contract(format!("target score {t} is not finite")));
    }
    let mut excluded = vec![false; scores.len()];
    for &f in filter {
        if f < scores.len() && f != target {
            excluded[f] = true;
        }
    }
    let (mut greater, mut equal) = (0usize, 0usize);
    for (i, &s) in scores.iter().enumerate() {
        if i == target || excluded[i] {
            continue;
        }
        if s > t {
            greater += 1;
        } else if s == t {
            equal += 1;
        }
    }
    Ok(1.0 + greater as f64 + equal as f64 / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    Raw,
    TimeFiltered,
}

impl fmt::Display for RankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankMode::Raw => "raw",
            RankMode::TimeFiltered => "time-filtered",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub mode: RankMode,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub num_queries: usize,
    pub config_digest: String,
}

impl MetricReport {
    pub fn from_ranks(split: &str, mode: RankMode, ranks: &[f64], config_digest: &str) -> Self {
        let n = ranks.len().max(1) as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            split: split.to_string(),
            mode,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            num_queries: ranks.len(),
            config_digest: config_digest.to_string(),
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<6} {:<14} MRR {:.4}  H@1 {:.4}  H@3 {:.4}  H@10 {:.4}  ({} queries)",
            self.split, self.mode, self.mrr, self.hits1, self.hits3, self.hits10, self.num_queries
        )
    }
}

/// Raw and filtered reports for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub raw: MetricReport,
    pub filtered: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: usize,
    pub inverse: bool,
    pub rank_raw: f64,
    pub rank_filtered: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub ranks: Vec<QueryRank>,
}

/// Source of candidate scores for a batch of queries, `[batch × entities]`.
pub trait Scorer {
    fn scores(&self, batch: &QueryBatch) -> Result<DenseArray, EvalError>;
}

pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl Scorer for ModelScorer<'_> {
    fn scores(&self, batch: &QueryBatch) -> Result<DenseArray, EvalError> {
        let memory = forward(batch, self.params, self.config)?;
        Ok(score(&memory, self.params)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub history_length: usize,
    pub batch_size: usize,
    /// Restricts ranking to queries with these (augmented) relation ids.
    pub query_relations: Option<Vec<usize>>,
    pub config_digest: String,
}

impl EvalOptions {
    pub fn new(history_length: usize, batch_size: usize) -> Self {
        Self {
            history_length,
            batch_size,
            query_relations: None,
            config_digest: String::new(),
        }
    }

    /// For rule-generated datasets only the rule head is predictable, so only
    /// head queries (both directions) are ranked.
    pub fn for_dataset(ds: &TkgDataset, history_length: usize, batch_size: usize) -> Self {
        let mut opts = Self::new(history_length, batch_size);
        if let Some(rule) = &ds.rule {
            opts.query_relations = Some(vec![rule.head, rule.head + ds.num_base_relations]);
        }
        opts
    }
}

/// Hex digest of any serializable configuration, for report provenance.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration serializes");
    let hash = Sha256::digest(&json);
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Queries of a split grouped by time, ascending, in file order within a time.
pub fn split_queries(ds: &TkgDataset, split: Split, relations: Option<&[usize]>) -> BTreeMap<usize, Vec<Quadruple>> {
    let mut groups: BTreeMap<usize, Vec<Quadruple>> = BTreeMap::new();
    for q in ds.split(split) {
        if relations.is_some_and(|rs| !rs.contains(&q.relation)) {
            continue;
        }
        groups.entry(q.time).or_default().push(*q);
    }
    groups
}

/// Ranks every query of `split`, each direction counted once.
pub fn evaluate(
    ds: &TkgDataset,
    snapshots: &[SnapshotGraph],
    filter: &FilterIndex,
    scorer: &dyn Scorer,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalOutcome, EvalError> {
    if !ds.is_augmented() {
        return Err(EvalError::Contract("evaluation needs inverse quadruples".into()));
    }
    if opts.batch_size == 0 || opts.history_length == 0 {
        return Err(EvalError::Contract("batch size and history length must be positive".into()));
    }
    let groups = split_queries(ds, split, opts.query_relations.as_deref());
    let mut ranks = Vec::new();
    for (&t, facts) in &groups {
        let history = history_window(snapshots, t, opts.history_length);
        for chunk in facts.chunks(opts.batch_size) {
            let queries = chunk.iter().map(|q| Query::new(q.subject, q.relation)).collect();
            let batch = QueryBatch::new(queries, t, ds.num_entities, history);
            let scores = scorer.scores(&batch)?;
            for (i, q) in chunk.iter().enumerate() {
                let row = &scores.data()[i * ds.num_entities..(i + 1) * ds.num_entities];
                ranks.push(QueryRank {
                    subject: q.subject,
                    relation: q.relation,
                    object: q.object,
                    time: q.time,
                    inverse: q.relation >= ds.num_base_relations,
                    rank_raw: rank_target(row, q.object, &[])?,
                    rank_filtered: rank_target(row, q.object, filter.objects(q.subject, q.relation, t))?,
                });
            }
        }
    }
    if ranks.is_empty() {
        return Err(EvalError::Contract(format!("split {split} has no queries to rank")));
    }
    let raw: Vec<f64> = ranks.iter().map(|r| r.rank_raw).collect();
    let filtered: Vec<f64> = ranks.iter().map(|r| r.rank_filtered).collect();
    let name = split.name();
    Ok(EvalOutcome {
        report: EvalReport {
            raw: MetricReport::from_ranks(name, RankMode::Raw, &raw, &opts.config_digest),
            filtered: MetricReport::from_ranks(name, RankMode::TimeFiltered, &filtered, &opts.config_digest),
        },
        ranks,
    })
}

pub fn write_per_query_csv(ranks: &[QueryRank], path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "query,direction,rank_raw,rank_filtered").map_err(io)?;
    for r in ranks {
        writeln!(
            out,
            "{} {} ? {},{},{},{}",
            r.subject,
            r.relation,
            r.time,
            if r.inverse { "inverse" } else { "forward" },
            r.rank_raw,
            r.rank_filtered
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Migrated metric divided by the directly trained metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationRatios {
    pub mrr: Option<f64>,
    pub hits1: Option<f64>,
    pub hits3: Option<f64>,
    pub hits10: Option<f64>,
}

impl MigrationRatios {
    pub fn between(migrated: &MetricReport, direct: &MetricReport) -> Self {
        let ratio = |a: f64, b: f64| if b > 0.0 { Some(a / b) } else { None };
        Self {
            mrr: ratio(migrated.mrr, direct.mrr),
            hits1: ratio(migrated.hits1, direct.hits1),
            hits3: ratio(migrated.hits3, direct.hits3),
            hits10: ratio(migrated.hits10, direct.hits10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub report: EvalReport,
    /// Ratios of the time-filtered metrics, when a direct report was given.
    pub ratios: Option<MigrationRatios>,
}

/// Evaluates a checkpoint trained elsewhere on `ds`'s test split.
pub fn migrate_eval(
    checkpoint: &Checkpoint,
    ds: &TkgDataset,
    snapshots: &[SnapshotGraph],
    filter: &FilterIndex,
    opts: &EvalOptions,
    direct: Option<&EvalReport>,
) -> Result<MigrationReport, EvalError> {
    checkpoint
        .check_dataset(ds)
        .map_err(|e| EvalError::Validation(e.to_string()))?;
    let config = checkpoint.config.model_config();
    let scorer = ModelScorer {
        params: &checkpoint.params,
        config: &config,
    };
    let outcome = evaluate(ds, snapshots, filter, &scorer, Split::Test, opts)?;
    let ratios = direct.map(|d| MigrationRatios::between(&outcome.report.filtered, &d.filtered));
    Ok(MigrationReport {
        report: outcome.report,
        ratios,
    })
}
