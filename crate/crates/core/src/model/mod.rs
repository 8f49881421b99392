//! The path-memory network: relation-aware message passing inside each
//! snapshot, gated memory passing between snapshots, and a feed-forward scorer.
//!
//! Nothing in the parameter set is indexed by entity; the per-query memory is
//! sized by the dataset only at run time.

mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::DiffError;

pub use forward::{
    forward, indicator_init, memory_passing, message, pau_layer, relation_projection, score,
    PathMemory, Query, QueryBatch, Recorder,
};
pub use params::{init_params, LayerParams, ModelParams, ParamVars};

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Number of PNA aggregators (mean, max, min, std).
pub const PNA_AGGREGATORS: usize = 4;
/// Number of PNA degree scalers (identity, amplification, attenuation).
pub const PNA_SCALERS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// How an edge's relation vector transforms the source state into a message.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsgVariant {
    /// Element-wise scaling of the source state.
    #[default]
    Multiply,
    /// Element-wise addition.
    Translate,
    /// Rotation of complex pairs by the unit-modulus relation vector.
    Rotate,
}

/// How memory from the previous snapshot seeds the next snapshot's layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpsVariant {
    /// Learned sigmoid gate between the indicator state and the previous memory.
    #[default]
    Gated,
    /// Previous memory mean-pooled over entities and broadcast.
    Pmmp,
    /// No passing; the returned memory is the mean over snapshots.
    Mmp,
    /// Plain average of the indicator state and the previous memory.
    Ipmm,
}

impl MsgVariant {
    pub const ALL: [MsgVariant; 3] = [MsgVariant::Multiply, MsgVariant::Translate, MsgVariant::Rotate];

    pub fn name(self) -> &'static str {
        match self {
            MsgVariant::Multiply => "multiply",
            MsgVariant::Translate => "translate",
            MsgVariant::Rotate => "rotate",
        }
    }
}

impl MpsVariant {
    pub const ALL: [MpsVariant; 4] = [MpsVariant::Gated, MpsVariant::Pmmp, MpsVariant::Mmp, MpsVariant::Ipmm];

    pub fn name(self) -> &'static str {
        match self {
            MpsVariant::Gated => "gated",
            MpsVariant::Pmmp => "pmmp",
            MpsVariant::Mmp => "mmp",
            MpsVariant::Ipmm => "ipmm",
        }
    }
}

impl fmt::Display for MsgVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for MpsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MsgVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MsgVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown message variant {s:?} (valid: multiply, translate, rotate)")))
    }
}

impl FromStr for MpsVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MpsVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown memory passing variant {s:?} (valid: gated, pmmp, mmp, ipmm)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Four aggregators under three degree scalers, concatenated.
    #[default]
    Pna,
    /// Plain sum over incoming messages.
    Sum,
}

impl Aggregation {
    /// Width of the aggregate in units of `dim`.
    pub fn blocks(self) -> usize {
        match self {
            Aggregation::Pna => PNA_AGGREGATORS * PNA_SCALERS,
            Aggregation::Sum => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub msg: MsgVariant,
    pub mps: MpsVariant,
    pub aggregation: Aggregation,
    /// Learned linear map from the aggregate back to `dim`.
    pub output_projection: bool,
    pub layer_norm: bool,
    pub activation: bool,
    pub shortcut: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64, 2)
    }
}

impl ModelConfig {
    pub fn new(dim: usize, layers: usize) -> Self {
        Self {
            dim,
            layers,
            msg: MsgVariant::default(),
            mps: MpsVariant::default(),
            aggregation: Aggregation::Pna,
            output_projection: true,
            layer_norm: true,
            activation: true,
            shortcut: true,
        }
    }

    /// Plain sum aggregation with every per-layer transform switched off, so
    /// each layer is one step of path-product propagation.
    pub fn path_oracle(dim: usize, layers: usize) -> Self {
        Self {
            aggregation: Aggregation::Sum,
            output_projection: false,
            layer_norm: false,
            activation: false,
            shortcut: false,
            ..Self::new(dim, layers)
        }
    }

    pub fn with_variants(mut self, msg: MsgVariant, mps: MpsVariant) -> Self {
        self.msg = msg;
        self.mps = mps;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim < 2 {
            return Err(ModelError::Config(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.layers == 0 {
            return Err(ModelError::Config("at least one aggregation layer is required".into()));
        }
        if self.msg == MsgVariant::Rotate && self.dim % 2 != 0 {
            return Err(ModelError::Config(format!(
                "rotate messages pair dimensions; dim {} is odd",
                self.dim
            )));
        }
        if !self.output_projection && self.aggregation.blocks() != 1 {
            return Err(ModelError::Config(
                "PNA aggregation needs the output projection to return to dim".into(),
            ));
        }
        Ok(())
    }
}
