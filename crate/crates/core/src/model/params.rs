use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::diffcore::{DenseArray, Tape, Var};

/// Parameters of one aggregation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Per-relation projections `W_p` stored side by side: `[dim × (relations·dim)]`,
    /// applied to query embeddings as row vectors.
    pub relation_weight: DenseArray,
    /// Per-relation biases `b_p`, `[relations·dim]`.
    pub relation_bias: DenseArray,
    /// Aggregate-to-`dim` projection, `[(blocks·dim) × dim]`.
    pub agg_weight: DenseArray,
    pub agg_bias: DenseArray,
    pub norm_gain: DenseArray,
    pub norm_bias: DenseArray,
}

/// Every learnable array. Shapes depend on the relation vocabulary, `dim`,
/// layer count and aggregation width, never on the entity count.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub num_base_relations: usize,
    pub dim: usize,
    /// Relation embeddings `[2·|R| × dim]`, inverse relations in the upper half.
    pub relation: DenseArray,
    pub layers: Vec<LayerParams>,
    pub gate_weight: DenseArray,
    pub gate_bias: DenseArray,
    pub score_hidden_weight: DenseArray,
    pub score_hidden_bias: DenseArray,
    pub score_out_weight: DenseArray,
    pub score_out_bias: DenseArray,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("non-empty shape")
}

/// Seeded initialization: weights ~ U(-1/√d, 1/√d), biases zero, norm gains one.
pub fn init_params(num_base_relations: usize, config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    if num_base_relations == 0 {
        return Err(ModelError::Config("relation vocabulary is empty".into()));
    }
    let d = config.dim;
    let p = 2 * num_base_relations;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relation = uniform(&mut rng, &[p, d], bound);
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            relation_weight: uniform(&mut rng, &[d, p * d], bound),
            relation_bias: DenseArray::zeros(&[p * d]),
            agg_weight: uniform(&mut rng, &[config.aggregation.blocks() * d, d], bound),
            agg_bias: DenseArray::zeros(&[d]),
            norm_gain: DenseArray::ones(&[d]),
            norm_bias: DenseArray::zeros(&[d]),
        })
        .collect();
    Ok(ModelParams {
        num_base_relations,
        dim: d,
        relation,
        layers,
        gate_weight: uniform(&mut rng, &[d, d], bound),
        gate_bias: DenseArray::zeros(&[d]),
        score_hidden_weight: uniform(&mut rng, &[d, d], bound),
        score_hidden_bias: DenseArray::zeros(&[d]),
        score_out_weight: uniform(&mut rng, &[d, 1], bound),
        score_out_bias: DenseArray::zeros(&[1]),
    })
}

impl ModelParams {
    pub fn num_relations(&self) -> usize {
        2 * self.num_base_relations
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Arrays with stable names, in a fixed order shared by every consumer.
    pub fn named(&self) -> Vec<(String, &DenseArray)> {
        let mut out = vec![("relation".to_string(), &self.relation)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layer{l}.relation_weight"), &layer.relation_weight),
                (format!("layer{l}.relation_bias"), &layer.relation_bias),
                (format!("layer{l}.agg_weight"), &layer.agg_weight),
                (format!("layer{l}.agg_bias"), &layer.agg_bias),
                (format!("layer{l}.norm_gain"), &layer.norm_gain),
                (format!("layer{l}.norm_bias"), &layer.norm_bias),
            ]);
        }
        out.extend([
            ("gate_weight".to_string(), &self.gate_weight),
            ("gate_bias".to_string(), &self.gate_bias),
            ("score_hidden_weight".to_string(), &self.score_hidden_weight),
            ("score_hidden_bias".to_string(), &self.score_hidden_bias),
            ("score_out_weight".to_string(), &self.score_out_weight),
            ("score_out_bias".to_string(), &self.score_out_bias),
        ]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut out = vec![&mut self.relation];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.relation_weight,
                &mut layer.relation_bias,
                &mut layer.agg_weight,
                &mut layer.agg_bias,
                &mut layer.norm_gain,
                &mut layer.norm_bias,
            ]);
        }
        out.extend([
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.score_hidden_weight,
            &mut self.score_hidden_bias,
            &mut self.score_out_weight,
            &mut self.score_out_bias,
        ]);
        out
    }

    pub fn num_arrays(&self) -> usize {
        1 + 6 * self.layers.len() + 6
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, a)| a.is_finite())
    }

    /// Replaces arrays by name; every array must be present with its current shape.
    pub fn load_named(&mut self, mut arrays: Vec<(String, DenseArray)>) -> Result<(), ModelError> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        if arrays.len() != names.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameter arrays, found {}",
                names.len(),
                arrays.len()
            )));
        }
        for (name, slot) in names.iter().zip(self.arrays_mut()) {
            let pos = arrays
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| ModelError::Contract(format!("missing parameter array {name}")))?;
            let (_, value) = arrays.swap_remove(pos);
            if value.shape() != slot.shape() {
                return Err(ModelError::Contract(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub relation: Var,
    pub layers: Vec<LayerVars>,
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub score_hidden_weight: Var,
    pub score_hidden_bias: Var,
    pub score_out_weight: Var,
    pub score_out_bias: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub relation_weight: Var,
    pub relation_bias: Var,
    pub agg_weight: Var,
    pub agg_bias: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

impl ParamVars {
    /// Records every array as a leaf (`trainable`) or a constant.
    pub fn record(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let mut put = |a: &DenseArray| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let relation = put(&params.relation);
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                relation_weight: put(&l.relation_weight),
                relation_bias: put(&l.relation_bias),
                agg_weight: put(&l.agg_weight),
                agg_bias: put(&l.agg_bias),
                norm_gain: put(&l.norm_gain),
                norm_bias: put(&l.norm_bias),
            })
            .collect();
        Self {
            relation,
            layers,
            gate_weight: put(&params.gate_weight),
            gate_bias: put(&params.gate_bias),
            score_hidden_weight: put(&params.score_hidden_weight),
            score_hidden_bias: put(&params.score_hidden_bias),
            score_out_weight: put(&params.score_out_weight),
            score_out_bias: put(&params.score_out_bias),
        }
    }

    /// Vars in the order of [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.relation];
        for l in &self.layers {
            out.extend([
                l.relation_weight,
                l.relation_bias,
                l.agg_weight,
                l.agg_bias,
                l.norm_gain,
                l.norm_bias,
            ]);
        }
        out.extend([
            self.gate_weight,
            self.gate_bias,
            self.score_hidden_weight,
            self.score_hidden_bias,
            self.score_out_weight,
            self.score_out_bias,
        ]);
        out
    }
}
