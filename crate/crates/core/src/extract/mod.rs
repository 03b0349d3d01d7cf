//! Temporal and structural causal-subgraph extraction and encoding.

mod mixer;
mod structural;
mod temporal;
mod time;

pub use mixer::{mixer_forward, MixerParams, MixerShape, MixerVars};
pub use structural::{
    endpoint_context, extract_structural, neighbor_scores, pair_subgraph, self_plus_mean,
    structural_embed, structural_repr, structural_scores, structural_subgraph, EndpointContext,
    Neighborhood, SparseVec, StructuralSide, StructuralSubgraph,
};
pub use temporal::{
    pool_selected, select_top_k, temporal_repr, temporal_scores, SideRows, TemporalScores,
};
pub use time::{edge_tokens, TimeEncoding, Tokens};
