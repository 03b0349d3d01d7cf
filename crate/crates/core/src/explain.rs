//! Post-hoc explanations from the temporal attention scores, and the
//! fidelity/sparsity evaluation built on them.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SigError};
use crate::graph::{EventStore, ExcludedEvents, LabeledQuery, NodeId, Query};
use crate::metrics::average_precision;
use crate::model::{SigModel, TemporalSelection};

pub const DEFAULT_SPARSITY_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// A candidate edge with its attention score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredEdge {
    pub event: usize,
    pub time: f64,
    pub score: f64,
}

/// `S_u ∪ S_v` ranked by score, then recency, then event index. An event
/// seen from both endpoints keeps its larger score.
pub fn candidate_universe(store: &EventStore, sel: &TemporalSelection) -> Vec<ScoredEdge> {
    let mut best: HashMap<usize, f64> = HashMap::new();
    for side in [&sel.u, &sel.v] {
        for (&e, &s) in side.events.iter().zip(&side.scores) {
            let slot = best.entry(e).or_insert(s);
            *slot = slot.max(s);
        }
    }
    let mut out: Vec<ScoredEdge> = best
        .into_iter()
        .map(|(event, score)| ScoredEdge {
            event,
            time: store.event(event).time,
            score,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.time.total_cmp(&a.time))
            .then(a.event.cmp(&b.event))
    });
    out
}

/// `ceil(s * n)`, forgiving float noise such as `0.6 * 10 = 6.000000000000001`.
pub fn explanation_size(n: usize, s: f64) -> usize {
    ((s * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_sparsity(s: f64) -> Result<()> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("sparsity {s} must lie in (0, 1]")))
    }
}

/// The explanation `G_c` and its complement `G_b` in the universe.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub query: Query,
    pub sparsity: f64,
    pub g_c: Vec<ScoredEdge>,
    pub g_b: Vec<ScoredEdge>,
}

impl Explanation {
    pub fn achieved_sparsity(&self) -> f64 {
        self.g_c.len() as f64 / (self.g_c.len() + self.g_b.len()) as f64
    }

    pub fn excluded(&self) -> ExcludedEvents {
        self.g_c.iter().map(|e| e.event).collect()
    }
}

/// Splits a ranked universe at sparsity `s`.
pub fn split_universe(query: Query, universe: &[ScoredEdge], s: f64) -> Result<Explanation> {
    check_sparsity(s)?;
    if universe.is_empty() {
        return Err(invalid(format!("no candidate edges to explain {query:?}")));
    }
    let m = explanation_size(universe.len(), s);
    Ok(Explanation {
        query,
        sparsity: s,
        g_c: universe[..m].to_vec(),
        g_b: universe[m..].to_vec(),
    })
}

pub fn explanation_at_sparsity(
    model: &SigModel,
    store: &EventStore,
    query: Query,
    s: f64,
) -> Result<Explanation> {
    check_sparsity(s)?;
    let (sel, _, _) = model.inspect(store, query, None)?;
    split_universe(query, &candidate_universe(store, &sel), s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidelityPoint {
    pub sparsity: f64,
    pub ap_full: f64,
    pub ap_residual: f64,
    pub fidelity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityCurve {
    pub points: Vec<FidelityPoint>,
    /// Trapezoid area divided by the sparsity range.
    pub aufsc: f64,
    pub aufsc_raw: f64,
}

/// Per-query material reused across sparsity levels.
struct Prepared {
    universe: Vec<ScoredEdge>,
    y_full: f64,
}

fn prepare(model: &SigModel, store: &EventStore, qs: &[LabeledQuery]) -> Result<Vec<Prepared>> {
    qs.iter()
        .map(|q| {
            let (sel, _, y_full) = model.inspect(store, q.query, None)?;
            Ok(Prepared {
                universe: candidate_universe(store, &sel),
                y_full,
            })
        })
        .collect()
}

/// Residual-graph score of one query. With an empty universe nothing can
/// be removed and the full score stands.
fn residual(
    model: &SigModel,
    store: &EventStore,
    q: Query,
    p: &Prepared,
    s: f64,
) -> Result<(f64, Option<Explanation>)> {
    if p.universe.is_empty() {
        return Ok((p.y_full, None));
    }
    let ex = split_universe(q, &p.universe, s)?;
    let hidden = ex.excluded();
    let y = model.predict(store, &[q], Some(&hidden), false)?[0].iid;
    Ok((y, Some(ex)))
}

/// `AP(full) - AP(residual)` over `qs`, hiding each query's `G_c`.
pub fn fidelity(
    model: &SigModel,
    store: &EventStore,
    qs: &[LabeledQuery],
    s: f64,
) -> Result<FidelityPoint> {
    Ok(fidelity_curve(model, store, qs, &[s])?.points[0])
}

pub fn fidelity_curve(
    model: &SigModel,
    store: &EventStore,
    qs: &[LabeledQuery],
    grid: &[f64],
) -> Result<FidelityCurve> {
    for &s in grid {
        check_sparsity(s)?;
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("sparsity grid must be strictly increasing"));
    }
    let labels: Vec<bool> = qs.iter().map(|q| q.label).collect();
    let prepared = prepare(model, store, qs)?;
    let full: Vec<f64> = prepared.iter().map(|p| p.y_full).collect();
    let ap_full = average_precision(&full, &labels)?;
    let mut points = Vec::with_capacity(grid.len());
    for &s in grid {
        let res = qs
            .iter()
            .zip(&prepared)
            .map(|(q, p)| residual(model, store, q.query, p, s).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        let ap_residual = average_precision(&res, &labels)?;
        points.push(FidelityPoint {
            sparsity: s,
            ap_full,
            ap_residual,
            fidelity: ap_full - ap_residual,
        });
    }
    let (aufsc, aufsc_raw) = if points.len() >= 2 {
        aufsc(
            &points
                .iter()
                .map(|p| (p.sparsity, p.fidelity))
                .collect::<Vec<_>>(),
        )?
    } else {
        (points[0].fidelity, 0.0)
    };
    Ok(FidelityCurve {
        points,
        aufsc,
        aufsc_raw,
    })
}

/// Trapezoid area under `(sparsity, fidelity)` points, returned as
/// `(area / (s_max - s_min), area)`.
pub fn aufsc(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(invalid("area under the curve needs at least two points"));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(invalid("sparsity values must be strictly increasing"));
    }
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    let range = points[points.len() - 1].0 - points[0].0;
    Ok((area / range, area))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub src: NodeId,
    pub dst: NodeId,
    pub t0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEdgeRecord {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
    pub dt: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node: NodeId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub query: QueryRecord,
    pub sparsity: f64,
    pub temporal: Vec<TemporalEdgeRecord>,
    pub structural: Vec<NodeRecord>,
    pub y_full: f64,
    pub y_residual: f64,
}

/// Explains one query at sparsity `s`: the `G_c` edges, the selected
/// structural neighbours, and the prediction with and without `G_c`.
pub fn explanation_record(
    model: &SigModel,
    store: &EventStore,
    query: Query,
    s: f64,
) -> Result<ExplanationRecord> {
    let (sel, sub, y_full) = model.inspect(store, query, None)?;
    let ex = split_universe(query, &candidate_universe(store, &sel), s)?;
    let y_residual = model.predict(store, &[query], Some(&ex.excluded()), false)?[0].iid;
    let temporal = ex
        .g_c
        .iter()
        .map(|e| {
            let ev = store.event(e.event);
            TemporalEdgeRecord {
                src: ev.src,
                dst: ev.dst,
                t: ev.time,
                dt: query.t0 - ev.time,
                score: e.score,
            }
        })
        .collect();
    let mut nodes: Vec<NodeRecord> = Vec::new();
    for side in [&sub.u, &sub.v] {
        for &i in &side.selected {
            let (node, score) = (side.neighbors[i], side.scores[i]);
            match nodes.iter_mut().find(|r| r.node == node) {
                Some(r) => r.score = r.score.max(score),
                None => nodes.push(NodeRecord { node, score }),
            }
        }
    }
    Ok(ExplanationRecord {
        query: QueryRecord {
            src: query.src,
            dst: query.dst,
            t0: query.t0,
        },
        sparsity: s,
        temporal,
        structural: nodes,
        y_full,
        y_residual,
    })
}

/// One JSON object per line.
pub fn export_explanations(records: &[ExplanationRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_explanations(path: &Path) -> Result<Vec<ExplanationRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SigError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
