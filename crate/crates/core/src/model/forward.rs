use crate::data::SnapshotGraph;
use crate::diffcore::{DenseArray, ReduceKind, Tape, Var};

use super::params::{LayerVars, ParamVars};
use super::{Aggregation, ModelConfig, ModelError, ModelParams, MpsVariant, MsgVariant, LAYER_NORM_EPS};

/// One query `(subject, relation, ?, t_q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub subject: usize,
    pub relation: usize,
}

impl Query {
    pub fn new(subject: usize, relation: usize) -> Self {
        Self { subject, relation }
    }
}

/// Queries sharing a query time and therefore a history window.
#[derive(Clone, Debug)]
pub struct QueryBatch<'a> {
    pub queries: Vec<Query>,
    pub t_query: usize,
    pub num_entities: usize,
    /// Snapshots strictly before `t_query`, ascending.
    pub history: &'a [SnapshotGraph],
}

impl<'a> QueryBatch<'a> {
    pub fn new(queries: Vec<Query>, t_query: usize, num_entities: usize, history: &'a [SnapshotGraph]) -> Self {
        Self {
            queries,
            t_query,
            num_entities,
            history,
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn validate(&self, num_relations: usize) -> Result<(), ModelError> {
        if self.queries.is_empty() {
            return Err(ModelError::Contract("empty query batch".into()));
        }
        if self.num_entities == 0 {
            return Err(ModelError::Contract("query batch over zero entities".into()));
        }
        for q in &self.queries {
            if q.subject >= self.num_entities {
                return Err(ModelError::Index(format!(
                    "subject {} out of range for {} entities",
                    q.subject, self.num_entities
                )));
            }
            if q.relation >= num_relations {
                return Err(ModelError::Index(format!(
                    "relation {} out of range for {num_relations} relations",
                    q.relation
                )));
            }
        }
        let mut last = None;
        for g in self.history {
            if g.time >= self.t_query {
                return Err(ModelError::Contract(format!(
                    "history snapshot at {} is not before query time {}",
                    g.time, self.t_query
                )));
            }
            if last.is_some_and(|t| g.time <= t) {
                return Err(ModelError::Contract("history snapshots are not strictly ascending".into()));
            }
            if g.num_entities() != self.num_entities {
                return Err(ModelError::Contract(format!(
                    "snapshot at {} covers {} entities, batch expects {}",
                    g.time,
                    g.num_entities(),
                    self.num_entities
                )));
            }
            last = Some(g.time);
        }
        Ok(())
    }
}

/// Final memory `[batch × entities × dim]`; entry `(q, o, :)` is the path
/// memory from query `q`'s subject to candidate `o`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMemory {
    pub values: DenseArray,
}

impl PathMemory {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_entities(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn row(&self, query: usize, entity: usize) -> &[f64] {
        let (e, d) = (self.num_entities(), self.dim());
        let start = (query * e + entity) * d;
        &self.values.data()[start..start + d]
    }
}

/// Degree scalers of one snapshot: amplification `log(deg+1)/mean` and its
/// reciprocal, both zero for entities without incoming edges.
fn degree_scalers(snapshot: &SnapshotGraph) -> (Vec<f64>, Vec<f64>) {
    let logs: Vec<f64> = snapshot.in_degree.iter().map(|&d| ((d + 1) as f64).ln()).collect();
    let active: Vec<f64> = snapshot
        .in_degree
        .iter()
        .zip(&logs)
        .filter(|(&d, _)| d > 0)
        .map(|(_, &l)| l)
        .collect();
    let mean = if active.is_empty() {
        1.0
    } else {
        active.iter().sum::<f64>() / active.len() as f64
    };
    let amp: Vec<f64> = logs.iter().map(|l| l / mean).collect();
    let att = amp.iter().map(|&a| if a > 0.0 { 1.0 / a } else { 0.0 }).collect();
    (amp, att)
}

/// Records the model on a tape. Hidden states are stored flat as
/// `[(batch·entities) × dim]`, query-major.
pub struct Recorder<'t> {
    pub tape: &'t mut Tape,
    pub vars: &'t ParamVars,
    pub config: &'t ModelConfig,
    num_relations: usize,
}

impl<'t> Recorder<'t> {
    pub fn new(tape: &'t mut Tape, vars: &'t ParamVars, config: &'t ModelConfig) -> Self {
        let num_relations = tape.value(vars.relation).rows();
        Self {
            tape,
            vars,
            config,
            num_relations,
        }
    }

    /// `H^{0,0}`: the query relation embedding on the subject row, zero elsewhere.
    pub fn indicator(&mut self, batch: &QueryBatch) -> Result<Var, ModelError> {
        batch.validate(self.num_relations)?;
        let e = batch.num_entities;
        let mut rels = Vec::with_capacity(batch.len() * e);
        let mut mask = Vec::with_capacity(batch.len() * e);
        for q in &batch.queries {
            for o in 0..e {
                rels.push(q.relation);
                mask.push(if o == q.subject { 1.0 } else { 0.0 });
            }
        }
        let spread = self.tape.gather_rows(self.vars.relation, &rels)?;
        Ok(self.tape.scale_rows(spread, &mask)?)
    }

    /// Message weights `w = r·W_p + b_p` for every relation type `p`, as
    /// `[(batch·relations) × dim]`, query-major.
    pub fn relation_weights(&mut self, layer: usize, queries: &[Query]) -> Result<Var, ModelError> {
        let lv = self.layer_vars(layer)?;
        if let Some(q) = queries.iter().find(|q| q.relation >= self.num_relations) {
            return Err(ModelError::Index(format!(
                "relation {} out of range for {} relations",
                q.relation, self.num_relations
            )));
        }
        let rels: Vec<usize> = queries.iter().map(|q| q.relation).collect();
        let r = self.tape.gather_rows(self.vars.relation, &rels)?;
        let proj = self.tape.matmul(r, lv.relation_weight)?;
        let proj = self.tape.add(proj, lv.relation_bias)?;
        let shape = [queries.len() * self.num_relations, self.config.dim];
        Ok(self.tape.reshape(proj, &shape)?)
    }

    fn layer_vars(&self, layer: usize) -> Result<LayerVars, ModelError> {
        self.vars.layers.get(layer).cloned().ok_or_else(|| {
            ModelError::Index(format!(
                "layer {layer} out of range for {} layers",
                self.vars.layers.len()
            ))
        })
    }

    fn message(&mut self, h: Var, w: Var) -> Result<Var, ModelError> {
        Ok(match self.config.msg {
            MsgVariant::Multiply => self.tape.mul(h, w)?,
            MsgVariant::Translate => self.tape.add(h, w)?,
            MsgVariant::Rotate => self.tape.rotate(h, w)?,
        })
    }

    /// Aggregate of incoming messages per destination row,
    /// `[(batch·entities) × (blocks·dim)]`.
    fn aggregate(&mut self, h: Var, snapshot: &SnapshotGraph, weights: Var, batch: usize) -> Result<Var, ModelError> {
        let e = snapshot.num_entities();
        let d = self.config.dim;
        let blocks = self.config.aggregation.blocks();
        if snapshot.edges.is_empty() {
            return Ok(self.tape.constant(DenseArray::zeros(&[batch * e, blocks * d])));
        }
        let n_edges = snapshot.edges.len();
        let mut src = Vec::with_capacity(batch * n_edges);
        let mut rel = Vec::with_capacity(batch * n_edges);
        let mut dst = Vec::with_capacity(batch * n_edges);
        for b in 0..batch {
            for edge in &snapshot.edges {
                src.push(b * e + edge.source);
                rel.push(b * self.num_relations + edge.relation);
                dst.push(b * e + edge.destination);
            }
        }
        let hs = self.tape.gather_rows(h, &src)?;
        let ws = self.tape.gather_rows(weights, &rel)?;
        let msgs = self.message(hs, ws)?;
        let segments = batch * e;
        match self.config.aggregation {
            Aggregation::Sum => Ok(self.tape.segment_reduce(ReduceKind::Sum, msgs, &dst, segments)?),
            Aggregation::Pna => {
                let (amp, att) = degree_scalers(snapshot);
                let amp: Vec<f64> = (0..batch).flat_map(|_| amp.iter().copied()).collect();
                let att: Vec<f64> = (0..batch).flat_map(|_| att.iter().copied()).collect();
                let mut parts = Vec::with_capacity(blocks);
                for kind in [ReduceKind::Mean, ReduceKind::Max, ReduceKind::Min, ReduceKind::Std] {
                    let agg = self.tape.segment_reduce(kind, msgs, &dst, segments)?;
                    parts.push(agg);
                    parts.push(self.tape.scale_rows(agg, &amp)?);
                    parts.push(self.tape.scale_rows(agg, &att)?);
                }
                Ok(self.tape.concat_cols(&parts)?)
            }
        }
    }

    /// One aggregation layer on one snapshot.
    pub fn layer(
        &mut self,
        h_prev: Var,
        snapshot: &SnapshotGraph,
        weights: Var,
        layer: usize,
        batch: usize,
    ) -> Result<Var, ModelError> {
        let lv = self.layer_vars(layer)?;
        let mut x = self.aggregate(h_prev, snapshot, weights, batch)?;
        if self.config.output_projection {
            x = self.tape.matmul(x, lv.agg_weight)?;
            x = self.tape.add(x, lv.agg_bias)?;
        }
        if self.config.layer_norm {
            x = self.tape.layer_norm(x, lv.norm_gain, lv.norm_bias, LAYER_NORM_EPS)?;
        }
        if self.config.activation {
            x = self.tape.relu(x)?;
        }
        if self.config.shortcut {
            x = self.tape.add(x, h_prev)?;
        }
        Ok(x)
    }

    /// Initial state of a snapshot from the indicator and the previous memory.
    pub fn memory_passing(&mut self, h00: Var, prev: Option<Var>, batch: usize) -> Result<Var, ModelError> {
        let Some(m) = prev else { return Ok(h00) };
        match self.config.mps {
            MpsVariant::Gated => {
                let z = self.tape.matmul(m, self.vars.gate_weight)?;
                let z = self.tape.add(z, self.vars.gate_bias)?;
                let u = self.tape.sigmoid(z)?;
                let keep = self.tape.mul(u, h00)?;
                let not_u = self.tape.scale_shift(u, -1.0, 1.0)?;
                let carry = self.tape.mul(not_u, m)?;
                Ok(self.tape.add(keep, carry)?)
            }
            MpsVariant::Ipmm => {
                let s = self.tape.add(h00, m)?;
                Ok(self.tape.scale_shift(s, 0.5, 0.0)?)
            }
            MpsVariant::Pmmp => {
                let rows = self.tape.value(m).rows();
                let e = rows / batch;
                let ids: Vec<usize> = (0..rows).map(|i| i / e).collect();
                let pooled = self.tape.segment_reduce(ReduceKind::Mean, m, &ids, batch)?;
                Ok(self.tape.gather_rows(pooled, &ids)?)
            }
            MpsVariant::Mmp => Ok(h00),
        }
    }

    /// Memory after the last history snapshot, `[(batch·entities) × dim]`.
    pub fn memory(&mut self, batch: &QueryBatch) -> Result<Var, ModelError> {
        let h00 = self.indicator(batch)?;
        let b = batch.len();
        let weights = (0..self.config.layers)
            .map(|l| self.relation_weights(l, &batch.queries))
            .collect::<Result<Vec<_>, _>>()?;
        let mut memories = Vec::with_capacity(batch.history.len());
        let mut prev = None;
        for snapshot in batch.history {
            let mut h = self.memory_passing(h00, prev, b)?;
            for (l, &w) in weights.iter().enumerate() {
                h = self.layer(h, snapshot, w, l, b)?;
            }
            memories.push(h);
            prev = Some(h);
        }
        let Some(&last) = memories.last() else { return Ok(h00) };
        if self.config.mps != MpsVariant::Mmp || memories.len() == 1 {
            return Ok(last);
        }
        let mut total = memories[0];
        for &m in &memories[1..] {
            total = self.tape.add(total, m)?;
        }
        Ok(self.tape.scale_shift(total, 1.0 / memories.len() as f64, 0.0)?)
    }

    /// Scorer logits `F(m)` for every row of `memory`, `[rows × 1]`.
    pub fn logits(&mut self, memory: Var) -> Result<Var, ModelError> {
        let v = self.vars;
        let h = self.tape.matmul(memory, v.score_hidden_weight)?;
        let h = self.tape.add(h, v.score_hidden_bias)?;
        let h = self.tape.relu(h)?;
        let o = self.tape.matmul(h, v.score_out_weight)?;
        Ok(self.tape.add(o, v.score_out_bias)?)
    }

    /// Probabilities for every row of `memory`, `[rows × 1]`.
    pub fn probabilities(&mut self, memory: Var) -> Result<Var, ModelError> {
        let z = self.logits(memory)?;
        Ok(self.tape.sigmoid(z)?)
    }
}

fn flat(a: &DenseArray, rows: usize) -> Result<DenseArray, ModelError> {
    let d = a.shape().last().copied().unwrap_or(1);
    if a.len() != rows * d {
        return Err(ModelError::Contract(format!(
            "array of shape {:?} does not hold {rows} rows",
            a.shape()
        )));
    }
    Ok(a.clone().reshaped(vec![rows, d])?)
}

fn constant_params(tape: &mut Tape, params: &ModelParams) -> ParamVars {
    ParamVars::record(tape, params, false)
}

/// `H^{0,0}` as `[batch × entities × dim]`.
pub fn indicator_init(batch: &QueryBatch, params: &ModelParams) -> Result<DenseArray, ModelError> {
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let config = ModelConfig::new(params.dim, params.num_layers().max(1));
    let h = Recorder::new(&mut tape, &vars, &config).indicator(batch)?;
    Ok(tape.value(h).clone().reshaped(vec![batch.len(), batch.num_entities, params.dim])?)
}

/// Message weights of `layer` (0-based) as `[queries × relations × dim]`.
pub fn relation_projection(params: &ModelParams, layer: usize, query_relations: &[usize]) -> Result<DenseArray, ModelError> {
    if query_relations.is_empty() {
        return Err(ModelError::Contract("no query relations".into()));
    }
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let config = ModelConfig::new(params.dim, params.num_layers().max(1));
    let queries: Vec<Query> = query_relations.iter().map(|&r| Query::new(0, r)).collect();
    let w = Recorder::new(&mut tape, &vars, &config).relation_weights(layer, &queries)?;
    Ok(tape
        .value(w)
        .clone()
        .reshaped(vec![queries.len(), params.num_relations(), params.dim])?)
}

/// Message from source state `h` under relation weight `w`.
pub fn message(h: &[f64], w: &[f64], variant: MsgVariant) -> Result<Vec<f64>, ModelError> {
    if h.len() != w.len() || h.is_empty() {
        return Err(ModelError::Contract(format!(
            "message needs equal non-empty lengths, got {} and {}",
            h.len(),
            w.len()
        )));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(DenseArray::new(vec![1, h.len()], h.to_vec())?);
    let wv = tape.constant(DenseArray::new(vec![1, w.len()], w.to_vec())?);
    let out = match variant {
        MsgVariant::Multiply => tape.mul(hv, wv)?,
        MsgVariant::Translate => tape.add(hv, wv)?,
        MsgVariant::Rotate => tape.rotate(hv, wv)?,
    };
    Ok(tape.value(out).data().to_vec())
}

/// One aggregation layer. `h_prev` is `[batch × entities × dim]` and
/// `weights` is the output of [`relation_projection`] for the same layer.
pub fn pau_layer(
    h_prev: &DenseArray,
    snapshot: &SnapshotGraph,
    weights: &DenseArray,
    params: &ModelParams,
    config: &ModelConfig,
    layer: usize,
) -> Result<DenseArray, ModelError> {
    config.validate()?;
    let shape = h_prev.shape().to_vec();
    if shape.len() != 3 || shape[1] != snapshot.num_entities() || shape[2] != params.dim {
        return Err(ModelError::Contract(format!(
            "hidden state shape {shape:?} does not match {} entities and dim {}",
            snapshot.num_entities(),
            params.dim
        )));
    }
    let b = shape[0];
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let h = tape.constant(flat(h_prev, b * shape[1])?);
    let w = tape.constant(flat(weights, b * params.num_relations())?);
    let out = Recorder::new(&mut tape, &vars, config).layer(h, snapshot, w, layer, b)?;
    Ok(tape.value(out).clone().reshaped(shape)?)
}

/// Initial state of a snapshot; both inputs are `[batch × entities × dim]`.
pub fn memory_passing(
    h00: &DenseArray,
    m_prev: Option<&DenseArray>,
    params: &ModelParams,
    variant: MpsVariant,
) -> Result<DenseArray, ModelError> {
    let shape = h00.shape().to_vec();
    if shape.len() != 3 {
        return Err(ModelError::Contract(format!("expected a 3-axis state, got {shape:?}")));
    }
    if let Some(m) = m_prev {
        if m.shape() != h00.shape() {
            return Err(ModelError::Contract(format!(
                "previous memory shape {:?} differs from {shape:?}",
                m.shape()
            )));
        }
    }
    let rows = shape[0] * shape[1];
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let config = ModelConfig::new(params.dim, params.num_layers().max(1)).with_variants(MsgVariant::Multiply, variant);
    let h = tape.constant(flat(h00, rows)?);
    let prev = m_prev.map(|m| flat(m, rows)).transpose()?.map(|m| tape.constant(m));
    let out = Recorder::new(&mut tape, &vars, &config).memory_passing(h, prev, shape[0])?;
    Ok(tape.value(out).clone().reshaped(shape)?)
}

/// Full forward pass over the batch's history window.
pub fn forward(batch: &QueryBatch, params: &ModelParams, config: &ModelConfig) -> Result<PathMemory, ModelError> {
    config.validate()?;
    check_compatible(params, config)?;
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let m = Recorder::new(&mut tape, &vars, config).memory(batch)?;
    let values = tape
        .value(m)
        .clone()
        .reshaped(vec![batch.len(), batch.num_entities, params.dim])?;
    Ok(PathMemory { values })
}

/// Candidate probabilities `[batch × entities]`.
pub fn score(memory: &PathMemory, params: &ModelParams) -> Result<DenseArray, ModelError> {
    if memory.dim() != params.dim {
        return Err(ModelError::Contract(format!(
            "memory dim {} differs from parameter dim {}",
            memory.dim(),
            params.dim
        )));
    }
    let (b, e) = (memory.batch(), memory.num_entities());
    let mut tape = Tape::new();
    let vars = constant_params(&mut tape, params);
    let config = ModelConfig::new(params.dim, params.num_layers().max(1));
    let m = tape.constant(flat(&memory.values, b * e)?);
    let p = Recorder::new(&mut tape, &vars, &config).probabilities(m)?;
    Ok(tape.value(p).clone().reshaped(vec![b, e])?)
}

pub(crate) fn check_compatible(params: &ModelParams, config: &ModelConfig) -> Result<(), ModelError> {
    let blocks = config.aggregation.blocks();
    let agg_rows = params.layers.first().map(|l| l.agg_weight.shape()[0]);
    if params.dim != config.dim || params.num_layers() != config.layers || agg_rows != Some(blocks * config.dim) {
        return Err(ModelError::Config(format!(
            "parameters (dim {}, {} layers) do not match configuration (dim {}, {} layers, {:?} aggregation)",
            params.dim,
            params.num_layers(),
            config.dim,
            config.layers,
            config.aggregation
        )));
    }
    Ok(())
}
