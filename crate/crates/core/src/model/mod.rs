//! The disentangled graph causal network.
//!
//! [`ops`] holds direct array implementations of each stage (mask,
//! attention, the three aggregators, the counterfactual mapping). [`forward`]
//! records the same computation on a [`Tape`](crate::tape::Tape) so it can be
//! differentiated; tests check the two agree.

pub mod checkpoint;
pub mod forward;
pub mod ops;
pub mod params;

use std::rc::Rc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{treatment_subgraphs, Graph, TreatmentSubgraphs};
use crate::scalar::Real;
use crate::tape::{Activation, EdgeGroups, EdgeList};

pub use forward::{forward, forward_on_tape, ForwardVars};
pub use ops::{
    aggregate_adjustment, aggregate_confounder, attention_scores, disentangle, map_counterfactual, predict_ite,
};
pub use params::{init_params, AggregatorParams, GdcParams, HeadParams, MaskParams, Mlp, Params};

/// Output nonlinearity of the aggregators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Elu,
    Relu,
    Tanh,
    Sigmoid,
}

impl Nonlinearity {
    pub fn activation<T: Real>(self) -> Activation<T> {
        match self {
            Nonlinearity::Elu => Activation::Elu,
            Nonlinearity::Relu => Activation::Relu,
            Nonlinearity::Tanh => Activation::Tanh,
            Nonlinearity::Sigmoid => Activation::Sigmoid,
        }
    }
}

/// Model variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Complete model.
    Full,
    /// Mask bypassed: both parts equal the raw features.
    NoDisentangle,
    /// Predictions use only the aggregated adjustment embedding.
    AdjustmentOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoDisentangle, Variant::AdjustmentOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDisentangle => "no_disentangle",
            Variant::AdjustmentOnly => "adjustment_only",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_disentangle" | "wo_dis" => Ok(Variant::NoDisentangle),
            "adjustment_only" | "wo_con" => Ok(Variant::AdjustmentOnly),
            other => Err(Error::Argument(format!(
                "unknown variant {other:?} (expected full, no_disentangle or adjustment_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub mask_hidden: usize,
    pub adjustment_layers: usize,
    pub nonlinearity: Nonlinearity,
    pub head_hidden: usize,
    pub attention_leak: f64,
    /// Share the confounder projection between the factual and
    /// counterfactual aggregators.
    pub tie_cf_weights: bool,
    /// Let the mapping loss backpropagate into the aggregated counterfactual target.
    pub cf_target_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            mask_hidden: 64,
            adjustment_layers: 2,
            nonlinearity: Nonlinearity::Elu,
            head_hidden: 64,
            attention_leak: 0.2,
            tie_cf_weights: true,
            cf_target_gradient: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.mask_hidden == 0 || self.adjustment_layers == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model dimensions and layer count must be positive".into()));
        }
        if !(self.attention_leak > 0.0 && self.attention_leak < 1.0) {
            return Err(Error::Config(format!(
                "attention_leak must lie in (0, 1), got {}",
                self.attention_leak
            )));
        }
        Ok(())
    }
}

/// Attention neighbourhoods derived from the graph and the treatments.
///
/// Every node attends over itself and its neighbours; `edges` lists those
/// `(target, source)` pairs grouped by target with the self pair first.
/// `same` keeps the self pair and same-treatment neighbours, `opposite` the
/// opposite-treatment neighbours only.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    pub edges: Rc<EdgeList>,
    pub full: Rc<EdgeGroups>,
    pub same: Rc<EdgeGroups>,
    pub opposite: Rc<EdgeGroups>,
    pub has_opp: Rc<Vec<bool>>,
    pub subgraphs: TreatmentSubgraphs,
}

impl Neighborhoods {
    pub fn new(graph: &Graph, treatments: &[u8]) -> Result<Self> {
        let subgraphs = treatment_subgraphs(graph, treatments)?;
        let n = graph.num_nodes();
        let mut pairs = Vec::with_capacity(n + 2 * graph.num_edges());
        for i in 0..n {
            pairs.push((i, i));
            pairs.extend(graph.neighbors(i).iter().map(|&j| (i, j)));
        }
        let edges = EdgeList { pairs };
        let full = EdgeGroups::from_filter(&edges, n, |_, _| true);
        let same = EdgeGroups::from_filter(&edges, n, |i, j| treatments[i] == treatments[j]);
        let opposite = EdgeGroups::from_filter(&edges, n, |i, j| treatments[i] != treatments[j]);
        Ok(Self {
            edges: Rc::new(edges),
            full: Rc::new(full),
            same: Rc::new(same),
            opposite: Rc::new(opposite),
            has_opp: Rc::new(subgraphs.has_opp.clone()),
            subgraphs,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.full.num_groups()
    }
}

/// Adjustment and confounder parts of the features.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledFeatures<T: Real> {
    pub x_a: Array2<T>,
    pub x_c: Array2<T>,
    pub mask_c: Array2<T>,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs<T: Real> {
    pub x_a: Array2<T>,
    pub x_c: Array2<T>,
    pub e_a: Array2<T>,
    pub e_c: Array2<T>,
    pub e_cf: Array2<T>,
    pub has_opp: Vec<bool>,
    pub e_cf_hat: Array2<T>,
    /// `X_c · P`, the residual confounder term.
    pub residual: Array2<T>,
    pub h_f: Array2<T>,
    pub h_cf: Array2<T>,
    pub y_f_hat: Array1<T>,
    pub y_cf_hat: Array1<T>,
    pub t_prob: Array1<T>,
    /// Final-layer attention logits over `Neighborhoods::edges`.
    pub attention_logits: Vec<T>,
}
