//! Fusion of the top-N layers' hidden states into one representation per token.
//!
//! For each position the query is the mean of the stacked layer states; keys
//! and values are the individual layer states. A single attention head over
//! the N layer views produces the fused state, followed by an output
//! projection.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::backbone::HiddenStack;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    AttnPool,
    MeanPool,
    LastLayer,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::AttnPool => "attn_pool",
            AggregationMode::MeanPool => "mean_pool",
            AggregationMode::LastLayer => "last_layer",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_pool" => Ok(Self::AttnPool),
            "mean_pool" => Ok(Self::MeanPool),
            "last_layer" => Ok(Self::LastLayer),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation mode `{other}` (attn_pool | mean_pool | last_layer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub n_layers: usize,
    pub mode: AggregationMode,
    pub d_model: usize,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedRepr {
    pub h_agg: Array2<f64>,
    /// `S x N` attention over layer views; uniform `1/N` outside `attn_pool`.
    pub layer_weights: Array2<f64>,
}

const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;

pub struct BoundAggregator {
    nodes: Vec<NodeId>,
}

impl BoundAggregator {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

impl Aggregator {
    pub fn new(d_model: usize, n_layers: usize, mode: AggregationMode, seed: u64) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidConfig("aggregated layer count N must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for name in ["w_q", "w_k", "w_v", "w_o"] {
            params.push(name, xavier_uniform(d_model, d_model, &mut rng));
        }
        Ok(Self {
            n_layers,
            mode,
            d_model,
            params,
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, requires_grad: bool) -> BoundAggregator {
        BoundAggregator {
            nodes: self.params.iter().map(|p| g.param(&p.value, requires_grad)).collect(),
        }
    }

    fn check_depth(&self, available: usize) -> Result<()> {
        if self.n_layers > available {
            return Err(Error::InvalidConfig(format!(
                "cannot aggregate the top {} layers of a {available}-layer model",
                self.n_layers
            )));
        }
        Ok(())
    }

    /// Aggregates the top-N entries of `hidden` (ordered shallow to deep).
    /// Returns the fused states and, in `attn_pool` mode, the `S x N` layer weights.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        b: &BoundAggregator,
        hidden: &[NodeId],
    ) -> Result<(NodeId, Option<NodeId>)> {
        self.check_depth(hidden.len())?;
        let top = &hidden[hidden.len() - self.n_layers..];
        let n = top.len();
        match self.mode {
            AggregationMode::LastLayer => Ok((*top.last().unwrap(), None)),
            AggregationMode::MeanPool => Ok((mean_nodes(g, top), None)),
            AggregationMode::AttnPool => {
                let mean = mean_nodes(g, top);
                let q = g.matmul(mean, b.nodes[WQ]);
                let scale = 1.0 / (self.d_model as f64).sqrt();
                let mut scores = Vec::with_capacity(n);
                let mut values = Vec::with_capacity(n);
                for &h in top {
                    let k = g.matmul(h, b.nodes[WK]);
                    let s = g.row_dot(q, k);
                    scores.push(g.scale(s, scale));
                    values.push(g.matmul(h, b.nodes[WV]));
                }
                let scores = g.concat_cols(&scores);
                let weights = g.softmax(scores);
                let mut acc = None;
                for (i, &v) in values.iter().enumerate() {
                    let w = g.slice_cols(weights, i, 1);
                    let term = g.mul_col(v, w);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.add(a, term),
                    });
                }
                let fused = g.matmul(acc.unwrap(), b.nodes[WO]);
                Ok((fused, Some(weights)))
            }
        }
    }

    /// Aggregates an explicit list of layer states (shallow to deep).
    pub fn aggregate_states(&self, states: &[Array2<f64>]) -> Result<AggregatedRepr> {
        self.check_depth(states.len())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let nodes: Vec<NodeId> = states.iter().map(|s| g.param(s, false)).collect();
        let (h, w) = self.forward_graph(&mut g, &b, &nodes)?;
        let s = states[0].nrows();
        let layer_weights = match w {
            Some(w) => g.value(w).to_owned(),
            None => Array2::from_elem((s, self.n_layers), 1.0 / self.n_layers as f64),
        };
        Ok(AggregatedRepr {
            h_agg: g.value(h).to_owned(),
            layer_weights,
        })
    }

    pub fn aggregate(&self, stack: &HiddenStack) -> Result<AggregatedRepr> {
        self.aggregate_states(&stack.states)
    }
}

fn mean_nodes(g: &mut Graph<'_>, items: &[NodeId]) -> NodeId {
    let mut acc = items[0];
    for &it in &items[1..] {
        acc = g.add(acc, it);
    }
    if items.len() == 1 {
        acc
    } else {
        g.scale(acc, 1.0 / items.len() as f64)
    }
}

/// Theoretical cost of the aggregator and analyzer relative to the backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsEstimate {
    /// `4(2N+1)·C·D²`
    pub f_agg: u128,
    /// `4CD² + 8NCD² + 4NCD`, before dropping the attention term.
    pub f_agg_full: u128,
    /// `8CD²`
    pub f_ana: u128,
    /// `24·d·D²·C`
    pub f_llm: u128,
    /// `(2N+1) / (6d)`
    pub ratio: Ratio<u128>,
}

impl FlopsEstimate {
    pub fn ratio_f64(&self) -> f64 {
        *self.ratio.numer() as f64 / *self.ratio.denom() as f64
    }
}

pub fn flops_estimate(n: u64, d_layers: u64, hidden: u64, context: u64) -> Result<FlopsEstimate> {
    if n == 0 || d_layers == 0 || hidden == 0 || context == 0 {
        return Err(Error::InvalidArgument("all FLOPs inputs must be >= 1".into()));
    }
    let (n, d, h, c) = (n as u128, d_layers as u128, hidden as u128, context as u128);
    Ok(FlopsEstimate {
        f_agg: 4 * (2 * n + 1) * c * h * h,
        f_agg_full: 4 * c * h * h + 8 * n * c * h * h + 4 * n * c * h,
        f_ana: 8 * c * h * h,
        f_llm: 24 * d * h * h * c,
        ratio: Ratio::new(2 * n + 1, 6 * d),
    })
}
