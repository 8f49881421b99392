//! Property checks shared by the model tests and the acceptance run. Each
//! returns a one-line summary on success and a diagnostic on failure.

use daemon_tkg::data::{build_snapshots, history_window, Split};
use daemon_tkg::diffcore::{DenseArray, ReduceKind, Tape, Var};
use daemon_tkg::model::{
    forward, score, ModelConfig, ModelParams, MpsVariant, MsgVariant, ParamVars, Query, QueryBatch, Recorder,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Check = Result<String, String>;

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `f(inputs) -> scalar var` for every input entry.
fn fd_check(inputs: &[DenseArray], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |arrays: &[DenseArray]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = arrays.iter().map(|a| t.constant(a.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, a) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).cloned().unwrap_or_else(|| DenseArray::zeros(a.shape()));
        for i in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric, 1e-6));
        }
    }
    worst
}

/// Weighted sum readout so every output entry receives a distinct cotangent.
fn readout(tape: &mut Tape, y: Var, rng_seed: u64) -> Var {
    let mut r = rng(rng_seed ^ 0x9e37);
    let w = random_array(&mut r, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);

fn op_cases() -> Vec<OpCase> {
    let ids = vec![0usize, 2, 0, 1, 2, 2];
    let mut cases: Vec<OpCase> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("sigmoid", vec![vec![3, 4]], Box::new(|t, v| t.sigmoid(v[0]).unwrap())),
        ("relu", vec![vec![3, 4]], Box::new(|t, v| t.relu(v[0]).unwrap())),
        (
            "log",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let s = t.sigmoid(v[0]).unwrap();
                t.log(s).unwrap()
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 5], vec![5], vec![5]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        ("gather", vec![vec![4, 3]], Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1]).unwrap())),
        ("concat", vec![vec![3, 2], vec![3, 4]], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap())),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("reshape", vec![vec![3, 4]], Box::new(|t, v| t.reshape(v[0], &[6, 2]).unwrap())),
        (
            "sqrt",
            vec![vec![3, 4]],
            Box::new(|t, v| {
                let s = t.sigmoid(v[0]).unwrap();
                t.sqrt(s).unwrap()
            }),
        ),
        ("scale_shift", vec![vec![3, 4]], Box::new(|t, v| t.scale_shift(v[0], -1.5, 0.25).unwrap())),
        ("scale_rows", vec![vec![3, 4]], Box::new(|t, v| t.scale_rows(v[0], &[0.5, -2.0, 3.0]).unwrap())),
        ("clamp", vec![vec![3, 4]], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5).unwrap())),
        ("rotate", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.rotate(v[0], v[1]).unwrap())),
    ];
    for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max, ReduceKind::Min, ReduceKind::Std] {
        let ids = ids.clone();
        cases.push((
            match kind {
                ReduceKind::Sum => "segment_sum",
                ReduceKind::Mean => "segment_mean",
                ReduceKind::Max => "segment_max",
                ReduceKind::Min => "segment_min",
                ReduceKind::Std => "segment_std",
            },
            vec![vec![6, 3]],
            Box::new(move |t, v| t.segment_reduce(kind, v[0], &ids, 4).unwrap()),
        ));
    }
    cases
}

/// Finite-difference check of every differentiable op, 20 seeded instances each.
pub fn op_gradients(seeds: u64) -> Check {
    let mut worst: (f64, &str) = (0.0, "");
    for seed in 0..seeds {
        for (name, shapes, f) in op_cases() {
            let mut r = rng(seed * 101 + name.len() as u64);
            let inputs: Vec<DenseArray> = shapes.iter().map(|s| random_array(&mut r, s)).collect();
            let err = fd_check(&inputs, &|t, v| {
                let y = f(t, v);
                readout(t, y, seed)
            });
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    if worst.0 < 1e-4 {
        Ok(format!("{} ops x {seeds} seeds, max rel err {:.2e} ({})", op_cases().len(), worst.0, worst.1))
    } else {
        Err(format!("op {} max rel err {:.2e} >= 1e-4", worst.1, worst.0))
    }
}

fn toy_instance(seed: u64, config: &ModelConfig) -> (ModelParams, Vec<daemon_tkg::data::SnapshotGraph>, Vec<Query>) {
    let mut r = rng(seed);
    let params = random_params(2, config, &mut r, 0.8);
    let snaps = (0..2).map(|t| random_snapshot(&mut r, t, 5, 4, 6)).collect();
    let queries = vec![Query::new(r.gen_range(0..5), r.gen_range(0..4)), Query::new(r.gen_range(0..5), r.gen_range(0..4))];
    (params, snaps, queries)
}

/// Whole-model gradient of a weighted sum of candidate probabilities.
pub fn model_gradient(seeds: u64) -> Check {
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for seed in 0..seeds {
        let msg = MsgVariant::ALL[seed as usize % 3];
        let mps = MpsVariant::ALL[seed as usize % 4];
        let config = ModelConfig::new(4, 2).with_variants(msg, mps);
        let (params, snaps, queries) = toy_instance(1000 + seed, &config);
        let batch = QueryBatch::new(queries, 2, 5, &snaps);
        let mut c = rng(seed + 77);
        let weights: Vec<f64> = (0..batch.len() * 5).map(|_| c.gen_range(-1.0..1.0)).collect();
        let objective = |p: &ModelParams| -> f64 {
            let m = forward(&batch, p, &config).unwrap();
            let s = score(&m, p).unwrap();
            s.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &params, true);
        let mut rec = Recorder::new(&mut tape, &vars, &config);
        let m = rec.memory(&batch).unwrap();
        let probs = rec.probabilities(m).unwrap();
        let w = tape.constant(DenseArray::new(vec![weights.len(), 1], weights.clone()).unwrap());
        let prod = tape.mul(probs, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (k, var) in vars.all().into_iter().enumerate() {
            let analytic = grads.get(var).cloned();
            let len = params.named()[k].1.len();
            for i in 0..len {
                let mut plus = params.clone();
                plus.arrays_mut()[k].data_mut()[i] += FD_STEP;
                let mut minus = params.clone();
                minus.arrays_mut()[k].data_mut()[i] -= FD_STEP;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * FD_STEP);
                let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
                let err = rel_err(a, numeric, 1e-4);
                if err > worst {
                    worst = err;
                    worst_at = format!("seed {seed} ({msg}/{mps}) {}[{i}]: analytic {a:.6e} numeric {numeric:.6e}", names[k]);
                }
            }
        }
    }
    if worst < 1e-3 {
        Ok(format!("{seeds} toy instances, max rel err {worst:.2e}"))
    } else {
        Err(format!("max rel err {worst:.2e} >= 1e-3 at {worst_at}"))
    }
}

/// Tape forward against the loop reference on random instances.
pub fn dense_oracle(instances: u64) -> Check {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng(5000 + i);
        let entities = r.gen_range(2..=20);
        let base = r.gen_range(1..=2);
        let snaps_n = r.gen_range(1..=3);
        let msg = MsgVariant::ALL[i as usize % 3];
        let mps = MpsVariant::ALL[(i / 3) as usize % 4];
        let config = ModelConfig::new(6, 2).with_variants(msg, mps);
        let params = random_params(base, &config, &mut r, 0.7);
        let snaps: Vec<_> = (0..snaps_n)
            .map(|t| {
                let edges = r.gen_range(0..3 * entities);
                random_snapshot(&mut r, t, entities, 2 * base, edges)
            })
            .collect();
        let queries: Vec<Query> = (0..r.gen_range(1..=3))
            .map(|_| Query::new(r.gen_range(0..entities), r.gen_range(0..2 * base)))
            .collect();
        let batch = QueryBatch::new(queries.clone(), snaps_n, entities, &snaps);
        let m = forward(&batch, &params, &config).map_err(|e| e.to_string())?;
        let s = score(&m, &params).map_err(|e| e.to_string())?;
        let reference = dense_forward(&params, &config, &queries, &snaps, entities);
        let flat: Vec<f64> = reference.iter().flatten().flatten().copied().collect();
        let ref_scores: Vec<f64> = reference.iter().flatten().map(|row| dense_score(&params, row)).collect();
        let diff = max_abs_diff(m.values.data(), &flat).max(max_abs_diff(s.data(), &ref_scores));
        if !(diff < 1e-9) {
            return Err(format!("instance {i} ({msg}/{mps}, {entities} entities): max abs diff {diff:.3e}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!("{instances} instances, max abs diff {worst:.2e}"))
}

/// Sum-aggregation memory against explicit walk enumeration.
pub fn path_semantics(instances: u64) -> Check {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng(9000 + i);
        let entities = r.gen_range(2..=8);
        let layers = r.gen_range(1..=3);
        let lazy = i % 2 == 1;
        let mut config = ModelConfig::path_oracle(4, layers);
        config.shortcut = lazy;
        let params = random_params(2, &config, &mut r, 1.0);
        let edges = r.gen_range(1..=2 * entities);
        let snap = random_snapshot(&mut r, 0, entities, 4, edges);
        let q = Query::new(r.gen_range(0..entities), r.gen_range(0..4));
        let history = [snap];
        let batch = QueryBatch::new(vec![q], 1, entities, &history);
        let m = forward(&batch, &params, &config).map_err(|e| e.to_string())?;
        let expected: Vec<f64> = enumerate_paths(&params, q, &history[0], lazy).concat();
        let diff = max_abs_diff(m.values.data(), &expected);
        if !(diff < 1e-9) {
            return Err(format!("instance {i} (w={layers}, lazy={lazy}): max abs diff {diff:.3e}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!("{instances} graphs of <= 8 entities, max abs diff {worst:.2e}"))
}

/// Scores on a relabeled dataset equal the permuted original scores.
pub fn relabel_equivariance(permutations: u64) -> Check {
    let mut r = rng(31);
    let ds = random_dataset(&mut r, 12, 3, 10, 8).add_inverse_quadruples().unwrap();
    let config = ModelConfig::new(8, 2);
    let params = random_params(3, &config, &mut r, 0.5);
    let snaps = build_snapshots(&ds, &Split::ALL).unwrap();
    let t_q = 8;
    let history = history_window(&snaps, t_q, 3);
    let queries: Vec<Query> = ds.test.iter().filter(|q| q.time == t_q).map(|q| Query::new(q.subject, q.relation)).collect();
    if queries.is_empty() {
        return Err("fixture has no queries at the chosen time".into());
    }
    let base = score(&forward(&QueryBatch::new(queries.clone(), t_q, 12, history), &params, &config).unwrap(), &params).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..permutations {
        let perm = random_permutation(&mut r, 12);
        let moved = ds.relabel_entities(&perm).unwrap();
        let snaps2 = build_snapshots(&moved, &Split::ALL).unwrap();
        let history2 = history_window(&snaps2, t_q, 3);
        let q2: Vec<Query> = queries.iter().map(|q| Query::new(perm[q.subject], q.relation)).collect();
        let s2 = score(&forward(&QueryBatch::new(q2, t_q, 12, history2), &params, &config).unwrap(), &params).unwrap();
        for b in 0..queries.len() {
            for o in 0..12 {
                let d = (base.get(&[b, o]) - s2.get(&[b, perm[o]])).abs();
                worst = worst.max(d);
            }
        }
    }
    if worst < 1e-9 {
        Ok(format!("{permutations} permutations, max abs diff {worst:.2e}"))
    } else {
        Err(format!("max abs diff {worst:.3e} >= 1e-9"))
    }
}

/// Each query's scores in a batch equal its scores when run alone, bit for bit.
pub fn query_isolation() -> Check {
    let mut r = rng(44);
    let config = ModelConfig::new(8, 2);
    let params = random_params(2, &config, &mut r, 0.5);
    let snaps: Vec<_> = (0..3).map(|t| random_snapshot(&mut r, t, 10, 4, 25)).collect();
    let queries: Vec<Query> = (0..5).map(|_| Query::new(r.gen_range(0..10), r.gen_range(0..4))).collect();
    let all = score(&forward(&QueryBatch::new(queries.clone(), 3, 10, &snaps), &params, &config).unwrap(), &params).unwrap();
    for (b, q) in queries.iter().enumerate() {
        let one = score(&forward(&QueryBatch::new(vec![*q], 3, 10, &snaps), &params, &config).unwrap(), &params).unwrap();
        if one.data() != &all.data()[b * 10..(b + 1) * 10] {
            return Err(format!("query {b} differs between batch and single runs"));
        }
    }
    Ok(format!("{} queries bit-identical alone and batched", queries.len()))
}

use std::time::{Duration, Instant};

use daemon_tkg::data::{build_filter_index, generate_synthetic, SyntheticSpec, TkgDataset as Dataset};
use daemon_tkg::eval::{evaluate as run_eval, migrate_eval, rank_target, ModelScorer, RankMode};
use daemon_tkg::train::{save_checkpoint, Checkpoint, TrainConfig, Trainer};

/// The rule dataset at seed 7 with inverse quadruples.
pub fn synthetic_dataset() -> Dataset {
    generate_synthetic(&SyntheticSpec::default(), 7)
        .unwrap()
        .add_inverse_quadruples()
        .unwrap()
}

pub fn synthetic_config() -> TrainConfig {
    TrainConfig {
        dim: 32,
        layers: 2,
        history_length: 3,
        seed: 7,
        max_epochs: 200,
        ..TrainConfig::default()
    }
}

pub struct TrainRun {
    pub best: Checkpoint,
    pub epochs: usize,
    pub best_mrr: f64,
    pub elapsed: Duration,
}

/// Trains until validation MRR reaches `target`, `max_epochs` pass, or `budget` elapses.
pub fn train_until(ds: &Dataset, config: TrainConfig, target: f64, budget: Duration) -> Result<TrainRun, String> {
    let start = Instant::now();
    let max_epochs = config.max_epochs;
    let mut trainer = Trainer::new(ds, config).map_err(|e| e.to_string())?;
    while trainer.epoch() < max_epochs && start.elapsed() < budget {
        let m = trainer.run_epoch().map_err(|e| e.to_string())?;
        if m.valid_mrr >= target {
            break;
        }
    }
    let epochs = trainer.epoch();
    let best = trainer.into_best().ok_or("no epoch completed")?;
    Ok(TrainRun {
        best_mrr: best.valid_mrr,
        best,
        epochs,
        elapsed: start.elapsed(),
    })
}

pub fn learnability() -> (Check, Option<Checkpoint>) {
    let ds = synthetic_dataset();
    let limit = Duration::from_secs(300);
    match train_until(&ds, synthetic_config(), 0.9, limit) {
        Err(e) => (Err(e), None),
        Ok(run) => {
            let line = format!(
                "valid filtered MRR {:.4} after {} epochs in {:.1}s",
                run.best_mrr,
                run.epochs,
                run.elapsed.as_secs_f64()
            );
            if run.best_mrr >= 0.9 && run.elapsed < limit {
                (Ok(line), Some(run.best))
            } else {
                (Err(line), Some(run.best))
            }
        }
    }
}

/// Migration onto a relabeled clone and entity-count independence of checkpoint size.
pub fn migration(checkpoint: &Checkpoint) -> Check {
    let ds = synthetic_dataset();
    let opts = checkpoint.config.eval_options(&ds);
    let snaps = build_snapshots(&ds, &Split::ALL).unwrap();
    let filter = build_filter_index(&ds).unwrap();
    let model = checkpoint.config.model_config();
    let scorer = ModelScorer {
        params: &checkpoint.params,
        config: &model,
    };
    let direct = run_eval(&ds, &snaps, &filter, &scorer, Split::Test, &opts).map_err(|e| e.to_string())?;
    let mut r = rng(77);
    let perm = random_permutation(&mut r, ds.num_entities);
    let clone = ds.relabel_entities(&perm).unwrap();
    let snaps2 = build_snapshots(&clone, &Split::ALL).unwrap();
    let filter2 = build_filter_index(&clone).unwrap();
    let migrated = migrate_eval(checkpoint, &clone, &snaps2, &filter2, &opts, Some(&direct.report)).map_err(|e| e.to_string())?;
    let (a, b) = (&direct.report, &migrated.report);
    let diff = [
        (a.filtered.mrr, b.filtered.mrr),
        (a.filtered.hits1, b.filtered.hits1),
        (a.filtered.hits3, b.filtered.hits3),
        (a.filtered.hits10, b.filtered.hits10),
        (a.raw.mrr, b.raw.mrr),
        (a.raw.hits1, b.raw.hits1),
        (a.raw.hits3, b.raw.hits3),
        (a.raw.hits10, b.raw.hits10),
    ]
    .iter()
    .map(|(x, y)| (x - y).abs())
    .fold(0.0, f64::max);
    if diff >= 1e-9 {
        return Err(format!("relabeled clone metrics differ by {diff:.3e}"));
    }
    let ratio = migrated.ratios.as_ref().and_then(|r| r.mrr).unwrap_or(f64::NAN);

    let small = checkpoint_size(20)?;
    let large = checkpoint_size(40)?;
    if small != large {
        return Err(format!("checkpoint size depends on entity count: {small} vs {large} bytes"));
    }
    Ok(format!(
        "test MRR {:.4} direct vs {:.4} migrated (ratio {ratio:.4}); checkpoint {small} bytes at |E|=20 and |E|=40",
        a.filtered.mrr, b.filtered.mrr
    ))
}

fn checkpoint_size(entities: usize) -> Result<u64, String> {
    let spec = SyntheticSpec {
        num_entities: entities,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec, 3).unwrap().add_inverse_quadruples().unwrap();
    let config = TrainConfig {
        dim: 8,
        max_epochs: 1,
        negatives: 4,
        ..synthetic_config()
    };
    let mut trainer = Trainer::new(&ds, config).map_err(|e| e.to_string())?;
    trainer.run_epoch().map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(trainer.best().unwrap(), &path).map_err(|e| e.to_string())?;
    Ok(std::fs::metadata(&path).map_err(|e| e.to_string())?.len())
}

/// Every message and memory-passing combination on the rule dataset.
pub fn ablation(epochs: usize) -> Check {
    let ds = synthetic_dataset();
    let mut results = Vec::new();
    for mps in MpsVariant::ALL {
        for msg in MsgVariant::ALL {
            let config = TrainConfig {
                msg_variant: msg,
                mps_variant: mps,
                max_epochs: epochs,
                ..synthetic_config()
            };
            let run = train_until(&ds, config, 2.0, Duration::from_secs(3600))
                .map_err(|e| format!("{mps}/{msg}: {e}"))?;
            results.push((mps, msg, run.best_mrr));
        }
    }
    let mrr = |mps, msg| results.iter().find(|r| r.0 == mps && r.1 == msg).unwrap().2;
    let base = mrr(MpsVariant::Gated, MsgVariant::Multiply);
    let table: Vec<String> = results.iter().map(|(a, b, m)| format!("{a}/{b} {m:.3}")).collect();
    for mps in [MpsVariant::Pmmp, MpsVariant::Mmp, MpsVariant::Ipmm] {
        let other = mrr(mps, MsgVariant::Multiply);
        if base < other - 0.05 {
            return Err(format!("gated/multiply {base:.4} trails {mps}/multiply {other:.4}; {}", table.join(", ")));
        }
    }
    Ok(format!("12 variants, {epochs} epochs each: {}", table.join(", ")))
}

fn brute_rank(scores: &[f64], target: usize, filter: &[usize]) -> f64 {
    let mut rank = 1.0;
    for i in 0..scores.len() {
        if i == target || filter.contains(&i) {
            continue;
        }
        if scores[i] > scores[target] {
            rank += 1.0;
        } else if scores[i] == scores[target] {
            rank += 0.5;
        }
    }
    rank
}

/// Ranking and metric aggregation against brute force on random score vectors.
pub fn metric_brute_force(vectors: usize) -> Check {
    let mut r = rng(123);
    let (mut raw_ranks, mut filt_ranks) = (Vec::new(), Vec::new());
    for v in 0..vectors {
        let n = r.gen_range(1..60);
        // coarse grid so ties are common
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 8.0).collect();
        let target = r.gen_range(0..n);
        let filter: Vec<usize> = (0..r.gen_range(0..n)).map(|_| r.gen_range(0..n)).collect();
        let raw = rank_target(&scores, target, &[]).map_err(|e| e.to_string())?;
        let filt = rank_target(&scores, target, &filter).map_err(|e| e.to_string())?;
        if raw != brute_rank(&scores, target, &[]) || filt != brute_rank(&scores, target, &filter) {
            return Err(format!("vector {v}: rank disagrees with brute force"));
        }
        if filt > raw {
            return Err(format!("vector {v}: filtered rank {filt} exceeds raw rank {raw}"));
        }
        raw_ranks.push(raw);
        filt_ranks.push(filt);
    }
    let report = daemon_tkg::eval::MetricReport::from_ranks("test", RankMode::Raw, &raw_ranks, "");
    let n = raw_ranks.len() as f64;
    let mut mrr = 0.0;
    let mut hits = [0.0; 3];
    for &rank in &raw_ranks {
        mrr += 1.0 / rank;
        for (h, k) in hits.iter_mut().zip([1.0, 3.0, 10.0]) {
            if rank <= k {
                *h += 1.0;
            }
        }
    }
    let expected = [mrr / n, hits[0] / n, hits[1] / n, hits[2] / n];
    let got = [report.mrr, report.hits1, report.hits3, report.hits10];
    if expected != got {
        return Err(format!("aggregate metrics {got:?} differ from brute force {expected:?}"));
    }
    Ok(format!("{vectors} score vectors agree exactly; filtered <= raw throughout"))
}
