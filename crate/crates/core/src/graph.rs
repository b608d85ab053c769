//! Fully connected instance relation graph and label knowledge propagation.
//!
//! Nodes are support instances followed by query instances. Layer-0 edges
//! are pairwise key/query logits restricted to support pairs; each later
//! layer aggregates neighbours through the previous edges, updates nodes
//! with a residual MLP block and recomputes unmasked edge logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcalc::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::glorot;
use crate::error::{Error, Result};

/// How neighbour weights are derived from incoming edge logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// `e_ij / sum_k e_ik`, guarded against vanishing denominators.
    RawSum,
    /// Softmax over the structurally present incoming edges.
    #[default]
    MaskedSoftmax,
}

/// How edge values are computed from node features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeFeatureMode {
    #[default]
    PairwiseLogits,
    /// Cosine similarity of node features; key/query projections unused.
    Cosine,
}

#[derive(Clone, Debug)]
pub struct NodeUpdateParams {
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub w4: ParamId,
    pub b4: ParamId,
}

/// Parameters of one propagation layer. Layer 0 has no node update.
#[derive(Clone, Debug)]
pub struct GraphLayerParams {
    pub w_key: ParamId,
    pub w_query: ParamId,
    pub update: Option<NodeUpdateParams>,
}

#[derive(Clone, Debug)]
pub struct GraphParams {
    pub hidden: usize,
    /// Layers `0..=L`.
    pub layers: Vec<GraphLayerParams>,
}

impl GraphParams {
    pub fn init(store: &mut ParamStore, hidden: usize, num_layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_layers == 0 || hidden == 0 {
            return Err(Error::contract("graph needs L >= 1 and d >= 1"));
        }
        let d = hidden;
        let mut layers = Vec::with_capacity(num_layers + 1);
        for l in 0..=num_layers {
            let w_key = store.add(format!("graph.{l}.w_key"), glorot(d, d, rng))?;
            let w_query = store.add(format!("graph.{l}.w_query"), glorot(d, d, rng))?;
            let update = if l == 0 {
                None
            } else {
                Some(NodeUpdateParams {
                    mlp_w1: store.add(format!("graph.{l}.mlp_w1"), glorot(d, d, rng))?,
                    mlp_b1: store.add(format!("graph.{l}.mlp_b1"), Tensor::zeros(&[d]))?,
                    mlp_w2: store.add(format!("graph.{l}.mlp_w2"), glorot(d, d, rng))?,
                    mlp_b2: store.add(format!("graph.{l}.mlp_b2"), Tensor::zeros(&[d]))?,
                    w4: store.add(format!("graph.{l}.w4"), glorot(d, d, rng))?,
                    b4: store.add(format!("graph.{l}.b4"), Tensor::zeros(&[d]))?,
                })
            };
            layers.push(GraphLayerParams { w_key, w_query, update });
        }
        Ok(Self { hidden, layers })
    }

    pub fn bind(store: &ParamStore, hidden: usize, num_layers: usize) -> Result<Self> {
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
        };
        let mut layers = Vec::with_capacity(num_layers + 1);
        for l in 0..=num_layers {
            let update = if l == 0 {
                None
            } else {
                Some(NodeUpdateParams {
                    mlp_w1: id(format!("graph.{l}.mlp_w1"))?,
                    mlp_b1: id(format!("graph.{l}.mlp_b1"))?,
                    mlp_w2: id(format!("graph.{l}.mlp_w2"))?,
                    mlp_b2: id(format!("graph.{l}.mlp_b2"))?,
                    w4: id(format!("graph.{l}.w4"))?,
                    b4: id(format!("graph.{l}.b4"))?,
                })
            };
            layers.push(GraphLayerParams {
                w_key: id(format!("graph.{l}.w_key"))?,
                w_query: id(format!("graph.{l}.w_query"))?,
                update,
            });
        }
        Ok(Self { hidden, layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Per-layer node and edge matrices of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeGraph {
    /// `V^(l)`, each `M x d`, for `l = 0..=L`.
    pub nodes: Vec<Var>,
    /// `E^(l)`, each `M x M`; entry `(i, j)` is the edge from `i` to `j`.
    pub edges: Vec<Var>,
    /// `true` for support nodes, which come first.
    pub support_mask: Vec<bool>,
}

impl EpisodeGraph {
    pub fn num_support(&self) -> usize {
        self.support_mask.iter().filter(|&&s| s).count()
    }

    pub fn final_edges(&self) -> Var {
        *self.edges.last().expect("at least one layer")
    }
}

/// Stacks support features then query features into `V^(0)`.
pub fn init_nodes(tape: &mut Tape, support: &[Var], query: &[Var]) -> Result<(Var, Vec<bool>)> {
    if support.is_empty() {
        return Err(Error::contract("episode graph needs at least one support node"));
    }
    if query.is_empty() {
        return Err(Error::contract("episode graph needs at least one query node"));
    }
    let d = tape.value(support[0]).len();
    for &f in support.iter().chain(query) {
        let v = tape.value(f);
        if v.len() != d || v.rows() != 1 {
            return Err(Error::contract(format!(
                "node feature of shape {:?}, expected {d} values",
                v.shape()
            )));
        }
    }
    let all: Vec<Var> = support.iter().chain(query).copied().collect();
    let v0 = tape.concat_rows(&all)?;
    let mut mask = vec![true; support.len()];
    mask.resize(all.len(), false);
    Ok((v0, mask))
}

/// Like [`init_nodes`] for features tagged with `is_support`, in any order.
/// Support nodes are moved first, keeping relative order within each block.
pub fn init_nodes_flagged(tape: &mut Tape, features: &[(Var, bool)]) -> Result<(Var, Vec<bool>)> {
    let support: Vec<Var> = features.iter().filter(|f| f.1).map(|f| f.0).collect();
    let query: Vec<Var> = features.iter().filter(|f| !f.1).map(|f| f.0).collect();
    init_nodes(tape, &support, &query)
}

/// `R(i, j) = q_i . k_j` with `k = W_k v`, `q = W_q v`; cosine similarity of
/// the raw features under [`EdgeFeatureMode::Cosine`].
pub fn pairwise_logits(
    tape: &mut Tape,
    store: &ParamStore,
    nodes: Var,
    layer: &GraphLayerParams,
    mode: EdgeFeatureMode,
) -> Result<Var> {
    match mode {
        EdgeFeatureMode::PairwiseLogits => {
            let wk = tape.param(store, layer.w_key)?;
            let wq = tape.param(store, layer.w_query)?;
            let wkt = tape.transpose(wk)?;
            let wqt = tape.transpose(wq)?;
            let keys = tape.matmul(nodes, wkt)?;
            let queries = tape.matmul(nodes, wqt)?;
            let keys_t = tape.transpose(keys)?;
            tape.matmul(queries, keys_t)
        }
        EdgeFeatureMode::Cosine => {
            let unit = tape.row_l2_normalize(nodes)?;
            let unit_t = tape.transpose(unit)?;
            tape.matmul(unit, unit_t)
        }
    }
}

/// `M x M` 0/1 matrix, 1 where both endpoints are support nodes.
pub fn support_pair_mask(support_mask: &[bool]) -> Vec<bool> {
    let m = support_mask.len();
    let mut out = vec![false; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = support_mask[i] && support_mask[j];
        }
    }
    out
}

/// Zeroes every logit incident to a query node.
pub fn init_edges(tape: &mut Tape, logits: Var, support_mask: &[bool]) -> Result<Var> {
    let m = support_mask.len();
    if tape.value(logits).shape() != [m, m] {
        return Err(Error::dim(
            "init_edges",
            format!("logits {:?} for {m} nodes", tape.value(logits).shape()),
        ));
    }
    let mask: Vec<f64> = support_pair_mask(support_mask)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::matrix(m, m, mask)?)?;
    tape.mul(logits, mask)
}

/// Structurally present edges of `E^(layer)`: support pairs at layer 0,
/// everything afterwards.
pub fn structural_mask(layer: usize, support_mask: &[bool]) -> Vec<bool> {
    if layer == 0 {
        support_pair_mask(support_mask)
    } else {
        vec![true; support_mask.len() * support_mask.len()]
    }
}

/// Node update from `V^(l-1)` and `E^(l-1)`:
/// `v_i = W4 relu(MLP(sum_j w_ij v_j) + v_i) + b4`.
///
/// `present` marks the structurally present entries of `edges` and is only
/// consulted under [`AggregationMode::MaskedSoftmax`].
pub fn aggregate_and_update_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    nodes: Var,
    edges: Var,
    layer: &GraphLayerParams,
    mode: AggregationMode,
    present: Vec<bool>,
) -> Result<Var> {
    let update = layer
        .update
        .as_ref()
        .ok_or_else(|| Error::contract("node update requested for layer 0"))?;
    let weights = match mode {
        AggregationMode::MaskedSoftmax => tape.masked_softmax_rows(edges, present)?,
        AggregationMode::RawSum => tape.row_sum_normalize(edges)?,
    };
    let aggregated = tape.matmul(weights, nodes)?;

    let w1 = tape.param(store, update.mlp_w1)?;
    let b1 = tape.param(store, update.mlp_b1)?;
    let w2 = tape.param(store, update.mlp_w2)?;
    let b2 = tape.param(store, update.mlp_b2)?;
    let w4 = tape.param(store, update.w4)?;
    let b4 = tape.param(store, update.b4)?;

    let w1t = tape.transpose(w1)?;
    let h = tape.matmul(aggregated, w1t)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let w2t = tape.transpose(w2)?;
    let h = tape.matmul(h, w2t)?;
    let h = tape.add_bias(h, b2)?;
    let h = tape.add(h, nodes)?;
    let h = tape.relu(h)?;
    let w4t = tape.transpose(w4)?;
    let out = tape.matmul(h, w4t)?;
    tape.add_bias(out, b4)
}

/// Runs `L` rounds of propagation and returns every layer.
pub fn propagate(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GraphParams,
    support: &[Var],
    query: &[Var],
    aggregation: AggregationMode,
    edge_mode: EdgeFeatureMode,
) -> Result<EpisodeGraph> {
    let num_layers = params.num_layers();
    if num_layers == 0 {
        return Err(Error::contract("propagation needs L >= 1"));
    }
    let (v0, support_mask) = init_nodes(tape, support, query)?;
    let r0 = pairwise_logits(tape, store, v0, &params.layers[0], edge_mode)?;
    let e0 = init_edges(tape, r0, &support_mask)?;
    let mut nodes = vec![v0];
    let mut edges = vec![e0];
    for l in 1..=num_layers {
        let present = structural_mask(l - 1, &support_mask);
        let v = aggregate_and_update_nodes(
            tape,
            store,
            nodes[l - 1],
            edges[l - 1],
            &params.layers[l],
            aggregation,
            present,
        )?;
        let e = pairwise_logits(tape, store, v, &params.layers[l], edge_mode)?;
        nodes.push(v);
        edges.push(e);
    }
    Ok(EpisodeGraph {
        nodes,
        edges,
        support_mask,
    })
}
