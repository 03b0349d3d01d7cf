//! The assembled predictor: extraction, encoding, confounder expectation,
//! and the three heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::confounders::{confounder_expectation, ConfounderDictionary, ExpectationParams};
use crate::error::{invalid, Result, SigError};
use crate::extract::{
    edge_tokens, endpoint_context, mixer_forward, pair_subgraph, select_top_k, temporal_repr,
    temporal_scores, EndpointContext, MixerParams, MixerShape, MixerVars, Neighborhood, SideRows,
    StructuralSubgraph, TimeEncoding, Tokens,
};
use crate::graph::{EdgeSequence, EventStore, ExcludedEvents, NodeFeatures, NodeId, Query};
use crate::heads::{
    predict_iid, predict_struct_intervention, predict_temporal_intervention, HeadParams, HeadVars,
};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Recent edges per endpoint (`N`).
    pub recent_n: usize,
    pub time_dim: usize,
    pub token_expansion: f64,
    pub channel_expansion: f64,
    pub hops: usize,
    /// Structural window `T`; `None` looks back over the whole history.
    pub window: Option<f64>,
    /// Edges (and neighbours) kept per endpoint.
    pub k_select: usize,
    pub k_confounders: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 100,
            recent_n: 50,
            time_dim: 100,
            token_expansion: 0.5,
            channel_expansion: 4.0,
            hops: 1,
            window: None,
            k_select: 20,
            k_confounders: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("recent_n", self.recent_n),
            ("time_dim", self.time_dim),
            ("hops", self.hops),
            ("k_select", self.k_select),
            ("k_confounders", self.k_confounders),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SigError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.token_expansion > 0.0) || !(self.channel_expansion > 0.0) {
            return Err(SigError::Config("mixer expansions must be positive".into()));
        }
        if let Some(w) = self.window {
            if !(w > 0.0) {
                return Err(SigError::Config(format!("window {w} must be positive")));
            }
        }
        Ok(())
    }

    pub fn neighborhood(&self) -> Neighborhood {
        Neighborhood {
            window: self.window.unwrap_or(f64::INFINITY),
            hops: self.hops,
        }
    }
}

/// `(y^I, y^S, y^T)`; the interventional outputs are absent when the model
/// runs without a dictionary or they were not requested.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionTriple {
    pub iid: f64,
    pub structural: Option<f64>,
    pub temporal: Option<f64>,
}

/// Attention over one endpoint's recent edges.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalSide {
    /// Store indices, newest first.
    pub events: Vec<usize>,
    /// `M^e` over `events`.
    pub scores: Vec<f64>,
    /// Positions into `events`, best first.
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalSelection {
    pub u: TemporalSide,
    pub v: TemporalSide,
}

/// Parameter-free inputs for one endpoint.
#[derive(Clone, Debug)]
pub struct EndpointInputs {
    pub node: NodeId,
    pub tokens: Tokens,
    pub times: Vec<f64>,
    pub structural: EndpointContext,
}

/// A source, a time, and several candidate destinations.
#[derive(Clone, Debug)]
pub struct QueryGroup {
    pub t0: f64,
    pub u: EndpointInputs,
    pub dsts: Vec<EndpointInputs>,
    pub structural: Vec<StructuralSubgraph>,
}

/// Tape handles for one forward query.
#[derive(Clone, Debug)]
pub struct QueryForward {
    pub iid: Var,
    pub structural: Option<Var>,
    pub temporal: Option<Var>,
    pub h_s: Var,
    pub h_t: Var,
    pub selection: TemporalSelection,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    mixer: MixerVars,
    w_m1: Var,
    w_m2: Var,
    heads: HeadVars,
    conf_s: (Var, Var),
    conf_t: (Var, Var),
    dict: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SigModel {
    pub config: ModelConfig,
    pub edge_dim: usize,
    pub node_dim: usize,
    pub params: ParameterSet,
    pub dictionary: Option<ConfounderDictionary>,
    time: TimeEncoding,
    mixer: MixerParams,
    w_m1: ParamId,
    w_m2: ParamId,
    heads: HeadParams,
    conf_s: ExpectationParams,
    conf_t: ExpectationParams,
}

impl SigModel {
    pub fn new(config: ModelConfig, edge_dim: usize, node_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if node_dim == 0 {
            return Err(invalid("node features are required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let h = config.hidden;
        let mixer = MixerParams::init(
            &mut params,
            "mixer",
            Self::mixer_shape(&config, edge_dim),
            &mut rng,
        )?;
        let w_m1 = params.insert_glorot("temporal/w_m1", h, h, &mut rng)?;
        let w_m2 = params.insert_glorot("temporal/w_m2", h, h, &mut rng)?;
        let (hs, ht) = (2 * node_dim, 2 * h);
        let l = hs + ht;
        let heads = HeadParams::init(&mut params, hs, ht, l, h, &mut rng)?;
        let conf_s = ExpectationParams::init(&mut params, "confounder_s", l, hs, h, &mut rng)?;
        let conf_t = ExpectationParams::init(&mut params, "confounder_t", l, ht, h, &mut rng)?;
        Ok(SigModel {
            time: TimeEncoding::with_dim(config.time_dim)?,
            config,
            edge_dim,
            node_dim,
            params,
            dictionary: None,
            mixer,
            w_m1,
            w_m2,
            heads,
            conf_s,
            conf_t,
        })
    }

    /// Rebuilds a model around an existing parameter set (from a checkpoint).
    pub fn from_parts(
        config: ModelConfig,
        edge_dim: usize,
        node_dim: usize,
        params: ParameterSet,
        dictionary: Option<ConfounderDictionary>,
    ) -> Result<Self> {
        config.validate()?;
        let template = SigModel::new(config.clone(), edge_dim, node_dim, 0)?;
        for (name, value) in template.params.iter() {
            let id = params.require(name)?;
            if params.value(id).shape() != value.shape() {
                return Err(SigError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    params.value(id).shape(),
                    value.shape()
                )));
            }
        }
        if params.len() != template.params.len() {
            return Err(SigError::Checkpoint("unexpected extra parameters".into()));
        }
        let l = 2 * node_dim + 2 * config.hidden;
        if let Some(d) = &dictionary {
            if d.width() != l {
                return Err(SigError::Checkpoint(format!(
                    "dictionary width {} != {l}",
                    d.width()
                )));
            }
        }
        Ok(SigModel {
            time: TimeEncoding::with_dim(config.time_dim)?,
            mixer: MixerParams::bind_names(&params, "mixer", Self::mixer_shape(&config, edge_dim))?,
            w_m1: params.require("temporal/w_m1")?,
            w_m2: params.require("temporal/w_m2")?,
            heads: HeadParams::bind_names(&params)?,
            conf_s: ExpectationParams::bind_names(&params, "confounder_s")?,
            conf_t: ExpectationParams::bind_names(&params, "confounder_t")?,
            config,
            edge_dim,
            node_dim,
            params,
            dictionary,
        })
    }

    fn mixer_shape(config: &ModelConfig, edge_dim: usize) -> MixerShape {
        MixerShape {
            tokens: config.recent_n,
            input: config.time_dim + edge_dim,
            hidden: config.hidden,
            token_expansion: config.token_expansion,
            channel_expansion: config.channel_expansion,
        }
    }

    pub fn time_encoding(&self) -> &TimeEncoding {
        &self.time
    }

    /// Width of a link embedding `[H^S || H^T]`.
    pub fn link_width(&self) -> usize {
        2 * self.node_dim + 2 * self.config.hidden
    }

    pub fn record(&self, tape: &mut Tape<'_>) -> ModelVars {
        ModelVars {
            mixer: self.mixer.record(tape),
            w_m1: tape.param(self.w_m1),
            w_m2: tape.param(self.w_m2),
            heads: self.heads.record(tape),
            conf_s: (tape.param(self.conf_s.key), tape.param(self.conf_s.query)),
            conf_t: (tape.param(self.conf_t.key), tape.param(self.conf_t.query)),
            dict: self
                .dictionary
                .as_ref()
                .map(|d| tape.constant(d.centroids.clone())),
        }
    }

    fn check_store<'s>(&self, store: &'s EventStore) -> Result<&'s NodeFeatures> {
        let feats = store
            .node_features()
            .ok_or_else(|| invalid("store has no node features attached"))?;
        if feats.dim() != self.node_dim || store.feature_dim() != self.edge_dim {
            return Err(invalid(format!(
                "store dims (node {}, edge {}) do not match the model (node {}, edge {})",
                feats.dim(),
                store.feature_dim(),
                self.node_dim,
                self.edge_dim
            )));
        }
        Ok(feats)
    }

    fn endpoint(
        &self,
        store: &EventStore,
        node: NodeId,
        t0: f64,
        excluded: Option<&ExcludedEvents>,
    ) -> Result<EndpointInputs> {
        let feats = self.check_store(store)?;
        let mut seq = store.recent_edges(node, t0, self.config.recent_n, None)?;
        if let Some(ex) = excluded {
            // drop hidden edges without refilling from older history
            seq.events.retain(|i| !ex.contains(i));
        }
        let tokens = self.tokens(store, &seq)?;
        let times = seq.events.iter().map(|&i| store.event(i).time).collect();
        let structural =
            endpoint_context(store, feats, node, t0, self.config.neighborhood(), excluded)?;
        Ok(EndpointInputs {
            node,
            tokens,
            times,
            structural,
        })
    }

    fn tokens(&self, store: &EventStore, seq: &EdgeSequence) -> Result<Tokens> {
        edge_tokens(store, seq, &self.time, self.config.recent_n)
    }

    /// Gathers everything parameter-free for `src` against each of `dsts` at
    /// `t0`. Events in `excluded` are invisible to both extractors.
    pub fn prepare_group(
        &self,
        store: &EventStore,
        src: NodeId,
        t0: f64,
        dsts: &[NodeId],
        excluded: Option<&ExcludedEvents>,
    ) -> Result<QueryGroup> {
        let feats = self.check_store(store)?;
        let u = self.endpoint(store, src, t0, excluded)?;
        let mut out = Vec::with_capacity(dsts.len());
        let mut structural = Vec::with_capacity(dsts.len());
        for &d in dsts {
            let v = self.endpoint(store, d, t0, excluded)?;
            structural.push(pair_subgraph(
                feats,
                &u.structural,
                &v.structural,
                self.config.k_select,
                false,
            )?);
            out.push(v);
        }
        Ok(QueryGroup {
            t0,
            u,
            dsts: out,
            structural,
        })
    }

    fn side_rows(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        tokens: &Tokens,
    ) -> Result<SideRows> {
        let f = if tokens.live == 0 {
            tape.constant(Tensor::zeros(&[self.config.recent_n, self.config.hidden]))
        } else {
            let x = tape.constant(tokens.matrix.clone());
            mixer_forward(tape, x, tokens.live, &vars.mixer)?
        };
        Ok(SideRows {
            f,
            live: tokens.live,
        })
    }

    fn temporal_side(&self, tape: &Tape<'_>, m: Option<Var>, ep: &EndpointInputs) -> TemporalSide {
        let Some(m) = m else {
            return TemporalSide::default();
        };
        let live = ep.tokens.live;
        let scores = tape.value(m).data()[..live].to_vec();
        let selected = select_top_k(&scores, &ep.times, self.config.k_select);
        TemporalSide {
            events: ep.tokens.events.clone(),
            scores,
            selected,
        }
    }

    /// Records the forward pass of every query in `group`. With
    /// `interventions`, the dictionary must be present and `y^S`, `y^T` are
    /// produced as well.
    pub fn forward_group(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        group: &QueryGroup,
        interventions: bool,
    ) -> Result<Vec<QueryForward>> {
        let dict = match (interventions, vars.dict) {
            (false, _) => None,
            (true, Some(d)) => Some(d),
            (true, None) => {
                return Err(invalid("interventional heads need a confounder dictionary"))
            }
        };
        let u_rows = self.side_rows(tape, vars, &group.u.tokens)?;
        let mut out = Vec::with_capacity(group.dsts.len());
        for (v, sub) in group.dsts.iter().zip(&group.structural) {
            let v_rows = self.side_rows(tape, vars, &v.tokens)?;
            let (h_t, selection) = if u_rows.live == 0 && v_rows.live == 0 {
                (
                    tape.constant(Tensor::zeros(&[2 * self.config.hidden])),
                    TemporalSelection::default(),
                )
            } else {
                let scores = temporal_scores(tape, u_rows, v_rows, vars.w_m1, vars.w_m2)?;
                let selection = TemporalSelection {
                    u: self.temporal_side(tape, scores.m_u, &group.u),
                    v: self.temporal_side(tape, scores.m_v, v),
                };
                let h_t = temporal_repr(
                    tape,
                    u_rows,
                    v_rows,
                    &scores,
                    &selection.u.selected,
                    &selection.v.selected,
                )?;
                (h_t, selection)
            };
            let h_s = tape.constant(Tensor::vector(sub.h_s.clone()));
            let iid = predict_iid(tape, h_s, h_t, &vars.heads)?;
            let (structural, temporal) = match dict {
                Some(d) => {
                    let (_, e_s) =
                        confounder_expectation(tape, h_s, d, vars.conf_s.0, vars.conf_s.1)?;
                    let (_, e_t) =
                        confounder_expectation(tape, h_t, d, vars.conf_t.0, vars.conf_t.1)?;
                    (
                        Some(predict_struct_intervention(tape, h_s, e_s, &vars.heads)?),
                        Some(predict_temporal_intervention(tape, h_t, e_t, &vars.heads)?),
                    )
                }
                None => (None, None),
            };
            out.push(QueryForward {
                iid,
                structural,
                temporal,
                h_s,
                h_t,
                selection,
            });
        }
        Ok(out)
    }

    /// Predictions for arbitrary queries. Consecutive queries sharing a
    /// source and time are evaluated together.
    pub fn predict(
        &self,
        store: &EventStore,
        queries: &[Query],
        excluded: Option<&ExcludedEvents>,
        interventions: bool,
    ) -> Result<Vec<PredictionTriple>> {
        let mut out = Vec::with_capacity(queries.len());
        let mut start = 0;
        while start < queries.len() {
            let q0 = queries[start];
            let mut end = start + 1;
            while end < queries.len() && queries[end].src == q0.src && queries[end].t0 == q0.t0 {
                end += 1;
            }
            let dsts: Vec<NodeId> = queries[start..end].iter().map(|q| q.dst).collect();
            let group = self.prepare_group(store, q0.src, q0.t0, &dsts, excluded)?;
            let mut tape = Tape::with_params(&self.params);
            let vars = self.record(&mut tape);
            for f in self.forward_group(&mut tape, &vars, &group, interventions)? {
                let iid = tape.value(f.iid).item();
                if !iid.is_finite() {
                    return Err(SigError::NonFinite(format!("prediction for {q0:?}")));
                }
                out.push(PredictionTriple {
                    iid,
                    structural: f.structural.map(|v| tape.value(v).item()),
                    temporal: f.temporal.map(|v| tape.value(v).item()),
                });
            }
            start = end;
        }
        Ok(out)
    }

    /// `y^I` for each query.
    pub fn score(&self, store: &EventStore, queries: &[Query]) -> Result<Vec<f64>> {
        Ok(self
            .predict(store, queries, None, false)?
            .into_iter()
            .map(|p| p.iid)
            .collect())
    }

    /// Temporal selection, structural subgraph, and `y^I` for one query.
    pub fn inspect(
        &self,
        store: &EventStore,
        query: Query,
        excluded: Option<&ExcludedEvents>,
    ) -> Result<(TemporalSelection, StructuralSubgraph, f64)> {
        let group = self.prepare_group(store, query.src, query.t0, &[query.dst], excluded)?;
        let mut tape = Tape::with_params(&self.params);
        let vars = self.record(&mut tape);
        let f = self
            .forward_group(&mut tape, &vars, &group, false)?
            .remove(0);
        let y = tape.value(f.iid).item();
        Ok((
            f.selection,
            group
                .structural
                .into_iter()
                .next()
                .expect("one destination"),
            y,
        ))
    }

    /// `[H^S || H^T]` for each query, one row per query.
    pub fn embed_links(&self, store: &EventStore, queries: &[Query]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(queries.len() * self.link_width());
        for q in queries {
            let group = self.prepare_group(store, q.src, q.t0, &[q.dst], None)?;
            let mut tape = Tape::with_params(&self.params);
            let vars = self.record(&mut tape);
            let f = self
                .forward_group(&mut tape, &vars, &group, false)?
                .remove(0);
            data.extend_from_slice(tape.value(f.h_s).data());
            data.extend_from_slice(tape.value(f.h_t).data());
        }
        if queries.is_empty() {
            return Err(invalid("no links to embed"));
        }
        Tensor::matrix(queries.len(), self.link_width(), data)
    }
}
