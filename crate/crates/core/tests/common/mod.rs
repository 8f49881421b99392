//! Shared fixtures and independent loop-based references for integration tests.
#![allow(dead_code)]

pub mod checks;

use daemon_tkg::data::{Edge, Quadruple, SnapshotGraph, TkgDataset};
use daemon_tkg::diffcore::DenseArray;
use daemon_tkg::model::{init_params, ModelConfig, ModelParams, MpsVariant, MsgVariant, Query};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fresh parameters with every array (biases and norm gains included) drawn
/// uniformly from `[-scale, scale]`, so no unit sits on an activation kink.
pub fn random_params(num_base_relations: usize, config: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams {
    let mut params = init_params(num_base_relations, config, rng.gen()).unwrap();
    for a in params.arrays_mut() {
        for v in a.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    params
}

pub fn random_snapshot(rng: &mut ChaCha8Rng, time: usize, entities: usize, relations: usize, edges: usize) -> SnapshotGraph {
    let edges = (0..edges)
        .map(|_| Edge {
            source: rng.gen_range(0..entities),
            relation: rng.gen_range(0..relations),
            destination: rng.gen_range(0..entities),
        })
        .collect();
    SnapshotGraph::new(time, edges, entities)
}

/// Random dataset with facts at every time in `0..times`, split 60/20/20 by time.
pub fn random_dataset(rng: &mut ChaCha8Rng, entities: usize, base_relations: usize, times: usize, per_step: usize) -> TkgDataset {
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..times {
        for _ in 0..per_step {
            let q = Quadruple::new(
                rng.gen_range(0..entities),
                rng.gen_range(0..base_relations),
                rng.gen_range(0..entities),
                t,
            );
            match t * 5 / times {
                0..=2 => train.push(q),
                3 => valid.push(q),
                _ => test.push(q),
            }
        }
    }
    TkgDataset::new(entities, base_relations, train, valid, test).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

type Rows = Vec<Vec<f64>>;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `w[layer][relation]` computed entry by entry: `b + Σ_i r_i W[i, ·]`.
pub fn dense_relation_weights(params: &ModelParams, relation: usize) -> Vec<Rows> {
    let d = params.dim;
    let r = params.relation.row(relation);
    params
        .layers
        .iter()
        .map(|layer| {
            (0..params.num_relations())
                .map(|p| {
                    (0..d)
                        .map(|j| {
                            let col = p * d + j;
                            let mut s = layer.relation_bias.data()[col];
                            for (i, ri) in r.iter().enumerate() {
                                s += ri * layer.relation_weight.get(&[i, col]);
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn dense_message(h: &[f64], w: &[f64], variant: MsgVariant) -> Vec<f64> {
    match variant {
        MsgVariant::Multiply => h.iter().zip(w).map(|(a, b)| a * b).collect(),
        MsgVariant::Translate => h.iter().zip(w).map(|(a, b)| a + b).collect(),
        MsgVariant::Rotate => {
            let mut out = vec![0.0; h.len()];
            for k in (0..h.len()).step_by(2) {
                let modulus = (w[k] * w[k] + w[k + 1] * w[k + 1]).sqrt().max(1e-8);
                let (c, s) = (w[k] / modulus, w[k + 1] / modulus);
                out[k] = h[k] * c - h[k + 1] * s;
                out[k + 1] = h[k] * s + h[k + 1] * c;
            }
            out
        }
    }
}

fn dense_linear(x: &[f64], w: &DenseArray, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w.get(&[i, j])).sum::<f64>())
        .collect()
}

fn dense_layer(params: &ModelParams, config: &ModelConfig, l: usize, h: &Rows, g: &SnapshotGraph, w: &[Vec<f64>]) -> Rows {
    let d = params.dim;
    let e = h.len();
    let layer = &params.layers[l];
    let mut degree = vec![0usize; e];
    for edge in &g.edges {
        degree[edge.destination] += 1;
    }
    let active: Vec<f64> = degree.iter().filter(|&&k| k > 0).map(|&k| ((k + 1) as f64).ln()).collect();
    let mean_log = if active.is_empty() { 1.0 } else { active.iter().sum::<f64>() / active.len() as f64 };
    let mut out = Vec::with_capacity(e);
    for o in 0..e {
        let msgs: Vec<Vec<f64>> = g
            .edges
            .iter()
            .filter(|edge| edge.destination == o)
            .map(|edge| dense_message(&h[edge.source], &w[edge.relation], config.msg))
            .collect();
        let n = msgs.len() as f64;
        let mut agg = Vec::new();
        if config.output_projection {
            let amp = ((degree[o] + 1) as f64).ln() / mean_log;
            let att = if amp > 0.0 { 1.0 / amp } else { 0.0 };
            let mut mean = vec![0.0; d];
            let mut max = vec![0.0; d];
            let mut min = vec![0.0; d];
            let mut std = vec![0.0; d];
            if !msgs.is_empty() {
                for j in 0..d {
                    let col: Vec<f64> = msgs.iter().map(|m| m[j]).collect();
                    mean[j] = col.iter().sum::<f64>() / n;
                    max[j] = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    min[j] = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    std[j] = (col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                }
            }
            for block in [mean, max, min, std] {
                agg.extend(block.iter().copied());
                agg.extend(block.iter().map(|v| v * amp));
                agg.extend(block.iter().map(|v| v * att));
            }
            agg = dense_linear(&agg, &layer.agg_weight, layer.agg_bias.data());
        } else {
            agg = vec![0.0; d];
            for m in &msgs {
                for j in 0..d {
                    agg[j] += m[j];
                }
            }
        }
        if config.layer_norm {
            let mu = agg.iter().sum::<f64>() / d as f64;
            let var = agg.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let denom = (var + 1e-5).sqrt();
            for j in 0..d {
                agg[j] = (agg[j] - mu) / denom * layer.norm_gain.data()[j] + layer.norm_bias.data()[j];
            }
        }
        if config.activation {
            agg.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        if config.shortcut {
            for j in 0..d {
                agg[j] += h[o][j];
            }
        }
        out.push(agg);
    }
    out
}

fn dense_passing(params: &ModelParams, variant: MpsVariant, h00: &Rows, m: &Rows) -> Rows {
    let d = params.dim;
    match variant {
        MpsVariant::Gated => h00
            .iter()
            .zip(m)
            .map(|(h, mr)| {
                let z = dense_linear(mr, &params.gate_weight, params.gate_bias.data());
                (0..d).map(|j| {
                    let u = sigmoid(z[j]);
                    u * h[j] + (1.0 - u) * mr[j]
                })
                .collect()
            })
            .collect(),
        MpsVariant::Ipmm => h00
            .iter()
            .zip(m)
            .map(|(h, mr)| h.iter().zip(mr).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect(),
        MpsVariant::Pmmp => {
            let pooled: Vec<f64> = (0..d).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / m.len() as f64).collect();
            vec![pooled; m.len()]
        }
        MpsVariant::Mmp => h00.clone(),
    }
}

/// Final memory per query, `[query][entity][dim]`, by explicit loops.
pub fn dense_forward(
    params: &ModelParams,
    config: &ModelConfig,
    queries: &[Query],
    history: &[SnapshotGraph],
    entities: usize,
) -> Vec<Rows> {
    let d = params.dim;
    queries
        .iter()
        .map(|q| {
            let mut h00 = vec![vec![0.0; d]; entities];
            h00[q.subject] = params.relation.row(q.relation).to_vec();
            let weights = dense_relation_weights(params, q.relation);
            let mut memories: Vec<Rows> = Vec::new();
            for g in history {
                let mut h = match memories.last() {
                    None => h00.clone(),
                    Some(m) => dense_passing(params, config.mps, &h00, m),
                };
                for (l, w) in weights.iter().enumerate() {
                    h = dense_layer(params, config, l, &h, g, w);
                }
                memories.push(h);
            }
            if memories.is_empty() {
                return h00;
            }
            if config.mps == MpsVariant::Mmp {
                let k = memories.len() as f64;
                (0..entities)
                    .map(|o| (0..d).map(|j| memories.iter().map(|m| m[o][j]).sum::<f64>() / k).collect())
                    .collect()
            } else {
                memories.pop().unwrap()
            }
        })
        .collect()
}

pub fn dense_score(params: &ModelParams, row: &[f64]) -> f64 {
    let hidden: Vec<f64> = dense_linear(row, &params.score_hidden_weight, params.score_hidden_bias.data())
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    sigmoid(dense_linear(&hidden, &params.score_out_weight, params.score_out_bias.data())[0])
}

/// Sum over explicitly enumerated walks from the query subject of
/// `r ⊙ Π w_p`. Each layer either traverses one edge with that layer's
/// weights or, when `lazy`, may also stay in place.
pub fn enumerate_paths(params: &ModelParams, query: Query, g: &SnapshotGraph, lazy: bool) -> Rows {
    let weights = dense_relation_weights(params, query.relation);
    let mut walks: Vec<(usize, Vec<f64>)> = vec![(query.subject, params.relation.row(query.relation).to_vec())];
    for w in &weights {
        let mut next = Vec::new();
        for (node, vec) in &walks {
            if lazy {
                next.push((*node, vec.clone()));
            }
            for edge in g.edges.iter().filter(|e| e.source == *node) {
                let v = vec.iter().zip(&w[edge.relation]).map(|(a, b)| a * b).collect();
                next.push((edge.destination, v));
            }
        }
        walks = next;
    }
    let mut rows = vec![vec![0.0; params.dim]; g.num_entities()];
    for (node, v) in walks {
        for (acc, x) in rows[node].iter_mut().zip(v) {
            *acc += x;
        }
    }
    rows
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
