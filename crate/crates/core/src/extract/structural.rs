//! Structural side. Node-feature arithmetic only; no learnable weights, so
//! everything here is plain `f64` and enters the tape as a constant.

use std::collections::HashMap;

use crate::error::{invalid, Result, SigError};
use crate::graph::{EventStore, ExcludedEvents, NodeFeatures, NodeId};
use crate::tensor::softmax_slice;

use super::temporal::select_top_k;

/// Sorted-index sparse vector; one-hot features keep these tiny.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVec {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseVec {
    fn from_map(map: HashMap<usize, f64>) -> Self {
        let mut pairs: Vec<(usize, f64)> = map.into_iter().filter(|p| p.1 != 0.0).collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let (idx, val) = pairs.into_iter().unzip();
        SparseVec { idx, val }
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        while i < self.idx.len() && j < other.idx.len() {
            match self.idx[i].cmp(&other.idx[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += self.val[i] * other.val[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i] = v;
        }
        out
    }
}

fn accumulate(map: &mut HashMap<usize, f64>, row: &[f64], w: f64) {
    for (i, &x) in row.iter().enumerate() {
        if x != 0.0 {
            *map.entry(i).or_insert(0.0) += w * x;
        }
    }
}

/// `x_node + mean(x_i for i in nodes)`; an empty set adds nothing.
pub fn self_plus_mean(features: &NodeFeatures, node: NodeId, nodes: &[NodeId]) -> SparseVec {
    let mut map = HashMap::new();
    accumulate(&mut map, features.row(node), 1.0);
    if !nodes.is_empty() {
        let w = 1.0 / nodes.len() as f64;
        for &i in nodes {
            accumulate(&mut map, features.row(i), w);
        }
    }
    SparseVec::from_map(map)
}

/// Window and depth of the structural neighbourhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighborhood {
    pub window: f64,
    pub hops: usize,
}

/// `z = x_node + mean(x_i)` over the windowed n-hop neighbours, which are
/// returned alongside.
pub fn structural_embed(
    store: &EventStore,
    features: &NodeFeatures,
    node: NodeId,
    t0: f64,
    hood: Neighborhood,
    excluded: Option<&ExcludedEvents>,
) -> Result<(SparseVec, Vec<NodeId>)> {
    let nbrs = store.n_hop_neighbors(node, t0, hood.window, hood.hops, excluded)?;
    Ok((self_plus_mean(features, node, &nbrs), nbrs))
}

/// `softmax(z . Z_i / sqrt(dim))` over the rows of `zs`; `None` when empty.
pub fn neighbor_scores(z: &SparseVec, zs: &[SparseVec], dim: usize) -> Result<Option<Vec<f64>>> {
    if zs.is_empty() {
        return Ok(None);
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let logits: Vec<f64> = zs.iter().map(|r| z.dot(r) * scale).collect();
    softmax_slice(&logits).map(Some)
}

/// `(M^n_u, M^n_v)` with `M^n_v = softmax(z_u . Z_v / sqrt(dim))`.
pub fn structural_scores(
    z_u: &SparseVec,
    z_v: &SparseVec,
    zs_u: &[SparseVec],
    zs_v: &[SparseVec],
    dim: usize,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    if zs_u.is_empty() && zs_v.is_empty() {
        return Err(SigError::NoStructuralContext);
    }
    Ok((
        neighbor_scores(z_v, zs_u, dim)?,
        neighbor_scores(z_u, zs_v, dim)?,
    ))
}

/// Scored neighbourhood of one endpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructuralSide {
    pub neighbors: Vec<NodeId>,
    pub scores: Vec<f64>,
    /// Positions into `neighbors`, best first.
    pub selected: Vec<usize>,
}

impl StructuralSide {
    pub fn selected_nodes(&self) -> Vec<NodeId> {
        self.selected.iter().map(|&i| self.neighbors[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralSubgraph {
    pub u: StructuralSide,
    pub v: StructuralSide,
    /// `H^S = [h_u || h_v]`, width `2 * feature_dim`.
    pub h_s: Vec<f64>,
}

/// Top-`k` neighbours per side; ties go to the lower node id.
pub fn structural_subgraph(
    neighbors_u: Vec<NodeId>,
    scores_u: Option<Vec<f64>>,
    neighbors_v: Vec<NodeId>,
    scores_v: Option<Vec<f64>>,
    k: usize,
) -> (StructuralSide, StructuralSide) {
    let side = |neighbors: Vec<NodeId>, scores: Option<Vec<f64>>| {
        let scores = scores.unwrap_or_default();
        let flat = vec![0.0; scores.len()];
        let selected = select_top_k(&scores, &flat, k);
        StructuralSide {
            neighbors,
            scores,
            selected,
        }
    };
    (side(neighbors_u, scores_u), side(neighbors_v, scores_v))
}

/// `h = x_node + mean(x_i)` over the selected neighbours, for both sides.
pub fn structural_repr(
    features: &NodeFeatures,
    u: NodeId,
    su: &StructuralSide,
    v: NodeId,
    sv: &StructuralSide,
) -> Vec<f64> {
    let dim = features.dim();
    let mut out = self_plus_mean(features, u, &su.selected_nodes()).to_dense(dim);
    out.extend(self_plus_mean(features, v, &sv.selected_nodes()).to_dense(dim));
    out
}

/// Everything about one endpoint that does not depend on the other one:
/// its embedding, its windowed neighbours, and their embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointContext {
    pub node: NodeId,
    pub z: SparseVec,
    pub neighbors: Vec<NodeId>,
    pub neighbor_z: Vec<SparseVec>,
}

pub fn endpoint_context(
    store: &EventStore,
    features: &NodeFeatures,
    node: NodeId,
    t0: f64,
    hood: Neighborhood,
    excluded: Option<&ExcludedEvents>,
) -> Result<EndpointContext> {
    if features.node_count() != store.node_count() {
        return Err(invalid("node features do not match the store"));
    }
    let (z, neighbors) = structural_embed(store, features, node, t0, hood, excluded)?;
    let neighbor_z = neighbors
        .iter()
        .map(|&i| structural_embed(store, features, i, t0, hood, excluded).map(|p| p.0))
        .collect::<Result<_>>()?;
    Ok(EndpointContext {
        node,
        z,
        neighbors,
        neighbor_z,
    })
}

/// Scores, selection, and `H^S` for a pair of endpoint contexts. When
/// neither endpoint has a windowed neighbour the sides are empty and
/// `H^S = [x_u || x_v]`; `strict` turns that case into
/// [`SigError::NoStructuralContext`].
pub fn pair_subgraph(
    features: &NodeFeatures,
    cu: &EndpointContext,
    cv: &EndpointContext,
    k: usize,
    strict: bool,
) -> Result<StructuralSubgraph> {
    let (m_u, m_v) =
        match structural_scores(&cu.z, &cv.z, &cu.neighbor_z, &cv.neighbor_z, features.dim()) {
            Ok(s) => s,
            Err(SigError::NoStructuralContext) if !strict => (None, None),
            Err(e) => return Err(e),
        };
    let (su, sv) = structural_subgraph(cu.neighbors.clone(), m_u, cv.neighbors.clone(), m_v, k);
    let h_s = structural_repr(features, cu.node, &su, cv.node, &sv);
    Ok(StructuralSubgraph { u: su, v: sv, h_s })
}

/// [`endpoint_context`] for both endpoints followed by [`pair_subgraph`].
#[allow(clippy::too_many_arguments)]
pub fn extract_structural(
    store: &EventStore,
    features: &NodeFeatures,
    u: NodeId,
    v: NodeId,
    t0: f64,
    hood: Neighborhood,
    k: usize,
    excluded: Option<&ExcludedEvents>,
    strict: bool,
) -> Result<StructuralSubgraph> {
    let cu = endpoint_context(store, features, u, t0, hood, excluded)?;
    let cv = endpoint_context(store, features, v, t0, hood, excluded)?;
    pair_subgraph(features, &cu, &cv, k, strict)
}
