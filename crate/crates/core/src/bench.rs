//! Per-edge latency as a function of the recent-edge count `N`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Event, EventStore, NodeFeatureMode, Query};
use crate::model::{ModelConfig, SigModel};

pub const DEFAULT_BENCH_NS: [usize; 4] = [10, 20, 40, 80];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchPoint {
    pub n: usize,
    pub per_edge_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares `y = a x + b`; returns `(a, b, R^2)`.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("affine fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("affine fit needs distinct x values"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - a * x - b).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok((a, b, r2))
}

/// A stream over disjoint cliques of `clique` nodes. Every node gets a long
/// history while its 2-hop neighbourhood stays small, so the timing is
/// dominated by the `N` recent tokens.
pub fn bench_store(
    nodes: usize,
    clique: usize,
    events: usize,
    edge_dim: usize,
    seed: u64,
) -> Result<EventStore> {
    if clique < 2 || nodes < clique || !nodes.is_multiple_of(clique) {
        return Err(invalid(format!(
            "{nodes} nodes do not split into cliques of {clique} >= 2"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let evs = (0..events)
        .map(|i| {
            let base = rng.gen_range(0..nodes / clique) * clique;
            let s = rng.gen_range(0..clique);
            let mut d = rng.gen_range(0..clique - 1);
            if d >= s {
                d += 1;
            }
            let f = (0..edge_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Event::new(base + s, base + d, i as f64, f)
        })
        .collect();
    let distinct = clique.min(nodes - 1);
    EventStore::from_events(evs, Some(nodes))?
        .default_node_features(&NodeFeatureMode::LeadingOneHot { distinct })
}

/// Times `y^I` for `queries` at each `N`, keeping the fastest of `reps`
/// passes.
pub fn bench_latency(
    store: &EventStore,
    base: &ModelConfig,
    ns: &[usize],
    queries: &[Query],
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if queries.is_empty() || reps == 0 {
        return Err(invalid("bench needs queries and at least one repetition"));
    }
    let node_dim = store
        .node_features()
        .ok_or_else(|| invalid("store has no node features"))?
        .dim();
    let mut points = Vec::with_capacity(ns.len());
    for &n in ns {
        let cfg = ModelConfig {
            recent_n: n,
            ..base.clone()
        };
        let model = SigModel::new(cfg, store.feature_dim(), node_dim, seed)?;
        // warm caches and allocator before timing
        model.score(store, &queries[..1])?;
        let mut best = f64::INFINITY;
        for _ in 0..reps {
            let t = Instant::now();
            model.score(store, queries)?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        points.push(BenchPoint {
            n,
            per_edge_secs: best / queries.len() as f64,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.per_edge_secs).collect();
    let (slope, intercept, r2) = affine_fit(&xs, &ys)?;
    Ok(BenchReport {
        points,
        slope,
        intercept,
        r2,
    })
}

/// Queries at the end of the stream between random members of one clique.
pub fn bench_queries(store: &EventStore, clique: usize, count: usize, seed: u64) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = store.time_span().1 + 1.0;
    (0..count)
        .map(|_| {
            let base = rng.gen_range(0..store.node_count() / clique) * clique;
            let s = rng.gen_range(0..clique);
            let d = (s + rng.gen_range(1..clique)) % clique;
            Query::new(base + s, base + d, t0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_a_line() {
        let (a, b, r2) = affine_fit(&[10.0, 20.0, 40.0, 80.0], &[3.0, 5.0, 9.0, 17.0]).unwrap();
        assert!((a - 0.2).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        let (_, _, r2) = affine_fit(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(r2.abs() < 1e-12);
        assert!(affine_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn small_bench_runs() {
        let s = bench_store(6, 3, 200, 2, 1).unwrap();
        let cfg = ModelConfig {
            hidden: 4,
            time_dim: 3,
            k_select: 2,
            ..ModelConfig::default()
        };
        let r = bench_latency(&s, &cfg, &[2, 4], &bench_queries(&s, 3, 3, 2), 1, 0).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!(r.points.iter().all(|p| p.per_edge_secs > 0.0));
    }
}
