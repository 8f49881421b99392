//! Negative-sampling training with the orthogonality regularizer, Adam, and
//! dataset-portable checkpoints.

mod checkpoint;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_filter_index, build_snapshots, history_window, DataError, FilterIndex, Quadruple, SnapshotGraph, Split, TkgDataset};
use crate::diffcore::{DenseArray, DiffError, Tape, Var};
use crate::eval::{config_digest, evaluate, split_queries, EvalError, EvalOptions, ModelScorer};
use crate::model::{init_params, ModelConfig, ModelError, ModelParams, MpsVariant, MsgVariant, ParamVars, Query, QueryBatch, Recorder};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, batch {batch} (optimizer step {step})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        step: u64,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: file is corrupted")]
    Checksum,
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub history_length: usize,
    pub negatives: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub msg_variant: MsgVariant,
    pub mps_variant: MpsVariant,
    pub clamp_eps: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            history_length: 10,
            negatives: 64,
            alpha: 1.0,
            learning_rate: 5e-4,
            max_epochs: 30,
            batch_size: 32,
            seed: 0,
            msg_variant: MsgVariant::Multiply,
            mps_variant: MpsVariant::Gated,
            clamp_eps: 1e-7,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.dim, self.layers).with_variants(self.msg_variant, self.mps_variant)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.negatives == 0 {
            return fail("negatives must be at least 1".into());
        }
        if self.history_length == 0 {
            return fail("history length must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return fail("batch size and workers must be at least 1".into());
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return fail(format!("clamp eps must lie in (0, 0.5), got {}", self.clamp_eps));
        }
        if !self.alpha.is_finite() {
            return fail("alpha must be finite".into());
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn eval_options(&self, ds: &TkgDataset) -> EvalOptions {
        let mut opts = EvalOptions::for_dataset(ds, self.history_length, self.batch_size);
        opts.config_digest = config_digest(self);
        opts
    }
}

/// Independent random streams derived from the run seed.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_NEGATIVES: u64 = 1;

/// `n` corruptions of the object slot, each drawn uniformly from the other entities.
pub fn sample_negatives(
    positive: &Quadruple,
    n: usize,
    num_entities: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Quadruple>, TrainError> {
    if num_entities < 2 {
        return Err(TrainError::Config(format!(
            "negative sampling needs at least 2 entities, got {num_entities}"
        )));
    }
    if positive.object >= num_entities {
        return Err(TrainError::Config(format!(
            "positive object {} out of range for {num_entities} entities",
            positive.object
        )));
    }
    Ok((0..n)
        .map(|_| {
            let mut o = rng.gen_range(0..num_entities - 1);
            if o >= positive.object {
                o += 1;
            }
            Quadruple { object: o, ..*positive }
        })
        .collect())
}

/// Mean over queries of `−log p_pos − (1/n) Σ log(1 − p_neg)`, after clamping.
/// `pos` is `[queries × 1]` and `neg` is `[(queries·n) × 1]`.
pub fn loss_tkg(tape: &mut Tape, pos: Var, neg: Var, n: usize, eps: f64) -> Result<Var, DiffError> {
    let queries = tape.value(pos).len();
    let p = tape.clamp(pos, eps, 1.0 - eps)?;
    let lp = tape.log(p)?;
    let sp = tape.sum(lp)?;
    let q = tape.clamp(neg, eps, 1.0 - eps)?;
    let q = tape.scale_shift(q, -1.0, 1.0)?;
    let lq = tape.log(q)?;
    let sq = tape.sum(lq)?;
    let sq = tape.scale_shift(sq, 1.0 / n as f64, 0.0)?;
    let total = tape.add(sp, sq)?;
    tape.scale_shift(total, -1.0 / queries as f64, 0.0)
}

/// Scalar form of [`loss_tkg`] for a single query.
pub fn loss_tkg_value(p_pos: f64, p_negs: &[f64], eps: f64) -> f64 {
    let c = |p: f64| p.clamp(eps, 1.0 - eps);
    let neg: f64 = p_negs.iter().map(|&p| (1.0 - c(p)).ln()).sum();
    -c(p_pos).ln() - neg / p_negs.len() as f64
}

/// Frobenius norm `‖RᵀR − αI‖`; `R` is `[relations × dim]`.
pub fn loss_reg(tape: &mut Tape, relation: Var, alpha: f64) -> Result<Var, DiffError> {
    let d = tape.value(relation).cols();
    let rt = tape.transpose(relation)?;
    let gram = tape.matmul(rt, relation)?;
    let mut target = DenseArray::zeros(&[d, d]);
    for i in 0..d {
        target.set(&[i, i], alpha);
    }
    let target = tape.constant(target);
    let diff = tape.sub(gram, target)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    tape.sqrt(s)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments, one pair per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    pub first: Vec<DenseArray>,
    pub second: Vec<DenseArray>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros: Vec<DenseArray> = params.named().iter().map(|(_, a)| DenseArray::zeros(a.shape())).collect();
        Self {
            learning_rate,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected update; `grads` follow [`ModelParams::named`] order.
    pub fn update(&mut self, params: &mut ModelParams, grads: &[DenseArray]) -> Result<(), TrainError> {
        let arrays = params.arrays_mut();
        if grads.len() != arrays.len() || self.first.len() != arrays.len() {
            return Err(TrainError::Config(format!(
                "{} gradients for {} parameter arrays",
                grads.len(),
                arrays.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (k, p) in arrays.into_iter().enumerate() {
            let g = grads[k].data();
            if g.len() != p.len() {
                return Err(TrainError::Config(format!("gradient {k} has the wrong length")));
            }
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= self.learning_rate * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One query with its sampled negative objects.
#[derive(Clone, Debug)]
struct TrainQuery {
    query: Query,
    object: usize,
    negatives: Vec<usize>,
}

/// Loss and gradients of one chunk of a batch, scaled by `weight`.
fn chunk_gradients(
    params: &ModelParams,
    config: &ModelConfig,
    items: &[TrainQuery],
    t: usize,
    num_entities: usize,
    history: &[SnapshotGraph],
    train: &TrainConfig,
    weight: f64,
    with_reg: bool,
) -> Result<(f64, Vec<DenseArray>), TrainError> {
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, params, true);
    let mut rec = Recorder::new(&mut tape, &vars, config);
    let batch = QueryBatch::new(items.iter().map(|i| i.query).collect(), t, num_entities, history);
    let memory = rec.memory(&batch)?;
    let mut pos_rows = Vec::with_capacity(items.len());
    let mut neg_rows = Vec::with_capacity(items.len() * train.negatives);
    for (b, item) in items.iter().enumerate() {
        pos_rows.push(b * num_entities + item.object);
        neg_rows.extend(item.negatives.iter().map(|&o| b * num_entities + o));
    }
    let pos_mem = rec.tape.gather_rows(memory, &pos_rows)?;
    let neg_mem = rec.tape.gather_rows(memory, &neg_rows)?;
    let pos = rec.probabilities(pos_mem)?;
    let neg = rec.probabilities(neg_mem)?;
    let mut loss = loss_tkg(&mut tape, pos, neg, train.negatives, train.clamp_eps)?;
    loss = tape.scale_shift(loss, weight, 0.0)?;
    if with_reg {
        let reg = loss_reg(&mut tape, vars.relation, train.alpha)?;
        loss = tape.add(loss, reg)?;
    }
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = vars
        .all()
        .into_iter()
        .zip(params.named())
        .map(|(v, (_, a))| grads.take(v).unwrap_or_else(|| DenseArray::zeros(a.shape())))
        .collect();
    Ok((value, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mrr: f64,
    pub valid_hits1: f64,
    pub valid_hits3: f64,
    pub valid_hits10: f64,
    pub seconds: f64,
}

/// Epoch-by-epoch optimizer state over one dataset.
pub struct Trainer<'a> {
    ds: &'a TkgDataset,
    config: TrainConfig,
    model_config: ModelConfig,
    params: ModelParams,
    adam: Adam,
    snapshots: Vec<SnapshotGraph>,
    filter: FilterIndex,
    eval_options: EvalOptions,
    negative_rng: ChaCha8Rng,
    epoch: usize,
    best: Option<Checkpoint>,
    metrics: Vec<EpochMetrics>,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a TkgDataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if !ds.is_augmented() {
            return Err(TrainError::Config("training needs inverse quadruples".into()));
        }
        if ds.train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let model_config = config.model_config();
        let params = init_params(ds.num_base_relations, &model_config, config.seed)?;
        let adam = Adam::new(&params, config.learning_rate);
        let snapshots = build_snapshots(ds, &Split::ALL)?;
        let filter = build_filter_index(ds)?;
        let eval_options = config.eval_options(ds);
        Ok(Self {
            ds,
            negative_rng: derived_rng(config.seed, STREAM_NEGATIVES),
            config,
            model_config,
            params,
            adam,
            snapshots,
            filter,
            eval_options,
            epoch: 0,
            best: None,
            metrics: Vec::new(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<Checkpoint> {
        self.best
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn batch_gradients(
        &self,
        items: &[TrainQuery],
        t: usize,
        history: &[SnapshotGraph],
    ) -> Result<(f64, Vec<DenseArray>), TrainError> {
        let workers = self.config.workers.min(items.len()).max(1);
        let total = items.len() as f64;
        let per = items.len().div_ceil(workers);
        let chunks: Vec<&[TrainQuery]> = items.chunks(per).collect();
        let run = |k: usize, chunk: &[TrainQuery]| {
            chunk_gradients(
                &self.params,
                &self.model_config,
                chunk,
                t,
                self.ds.num_entities,
                history,
                &self.config,
                chunk.len() as f64 / total,
                k == 0,
            )
        };
        let results: Vec<Result<(f64, Vec<DenseArray>), TrainError>> = if chunks.len() == 1 {
            vec![run(0, chunks[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .iter()
                    .enumerate()
                    .map(|(k, c)| s.spawn(move || run(k, c)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let mut iter = results.into_iter();
        let (mut loss, mut grads) = iter.next().expect("at least one chunk")?;
        for r in iter {
            let (l, g) = r?;
            loss += l;
            for (acc, add) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
                    *a += b;
                }
            }
        }
        Ok((loss, grads))
    }

    /// One pass over the training queries, then validation.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let start = Instant::now();
        self.epoch += 1;
        let groups = split_queries(self.ds, Split::Train, None);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (&t, facts) in &groups {
            let history = history_window(&self.snapshots, t, self.config.history_length);
            for chunk in facts.chunks(self.config.batch_size) {
                let mut items = Vec::with_capacity(chunk.len());
                for q in chunk {
                    let negs = sample_negatives(q, self.config.negatives, self.ds.num_entities, &mut self.negative_rng)?;
                    items.push(TrainQuery {
                        query: Query::new(q.subject, q.relation),
                        object: q.object,
                        negatives: negs.iter().map(|n| n.object).collect(),
                    });
                }
                batches += 1;
                let (loss, grads) = self.batch_gradients(&items, t, history)?;
                let (epoch, step) = (self.epoch, self.adam.step + 1);
                let fail = |what| TrainError::NonFinite {
                    what,
                    epoch,
                    batch: batches,
                    step,
                };
                if !loss.is_finite() {
                    return Err(fail("loss"));
                }
                if grads.iter().any(|g| !g.is_finite()) {
                    return Err(fail("gradient"));
                }
                self.adam.update(&mut self.params, &grads)?;
                if !self.params.is_finite() {
                    return Err(fail("parameter"));
                }
                loss_sum += loss;
            }
        }
        let report = self.validate()?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            valid_mrr: report.mrr,
            valid_hits1: report.hits1,
            valid_hits3: report.hits3,
            valid_hits10: report.hits10,
            seconds: start.elapsed().as_secs_f64(),
        };
        if self.best.as_ref().is_none_or(|b| report.mrr > b.valid_mrr) {
            self.best = Some(Checkpoint::new(
                self.config.clone(),
                self.params.clone(),
                Some(self.adam.clone()),
                self.epoch,
                report.mrr,
            ));
        }
        log::info!(
            "epoch {} loss {:.5} valid MRR {:.4} ({:.2}s)",
            metrics.epoch,
            metrics.train_loss,
            metrics.valid_mrr,
            metrics.seconds
        );
        self.metrics.push(metrics.clone());
        Ok(metrics)
    }

    fn validate(&self) -> Result<crate::eval::MetricReport, TrainError> {
        let split = if self.ds.valid.is_empty() { Split::Train } else { Split::Valid };
        let scorer = ModelScorer {
            params: &self.params,
            config: &self.model_config,
        };
        let outcome = evaluate(self.ds, &self.snapshots, &self.filter, &scorer, split, &self.eval_options)?;
        Ok(outcome.report.filtered)
    }
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains for `max_epochs` epochs and keeps the best-validation checkpoint.
pub fn fit(ds: &TkgDataset, config: TrainConfig) -> Result<FitOutcome, TrainError> {
    let mut trainer = Trainer::new(ds, config)?;
    for _ in 0..trainer.config.max_epochs {
        trainer.run_epoch()?;
    }
    let metrics = trainer.metrics.clone();
    let best = trainer
        .into_best()
        .ok_or_else(|| TrainError::Config("max_epochs must be at least 1".into()))?;
    Ok(FitOutcome { best, metrics })
}
