//! Gradient-check drivers over random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, random_inputs, registered_ops, GradCheckReport};
use crate::error::Result;
use crate::graph::{Event, EventStore, NodeFeatureMode, Query};
use crate::heads::LossWeights;
use crate::model::{ModelConfig, SigModel};
use crate::trainer::{fit_dictionary, group_queries, loss_grad_check, stream_queries};

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;

/// Name of the composite check in reports.
pub const COMPOSITE: &str = "query_to_loss";

/// Every registered op on `instances` random inputs, merged per op.
pub fn op_grad_checks(instances: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in registered_ops() {
        let mut report = GradCheckReport {
            tolerance: GRAD_TOL,
            ..Default::default()
        };
        for _ in 0..instances {
            let inputs = random_inputs(&case.input_shapes, &mut rng);
            report.merge(grad_check(case.build, &inputs, GRAD_EPS, GRAD_TOL)?);
        }
        out.push((case.name, report));
    }
    Ok(out)
}

/// One random small graph, model, dictionary and query batch, checked from
/// the raw events to the weighted loss.
pub fn composite_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = rng.gen_range(6..12);
    let edge_dim = rng.gen_range(1..4);
    let events = (0..120)
        .map(|i| {
            let s = rng.gen_range(0..nodes);
            let d = (s + rng.gen_range(1..nodes)) % nodes;
            let f = (0..edge_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Event::new(s, d, i as f64 + rng.gen_range(0.0..0.5), f)
        })
        .collect();
    let store = EventStore::from_events(events, Some(nodes))?
        .default_node_features(&NodeFeatureMode::default())?;
    let cfg = ModelConfig {
        hidden: rng.gen_range(4..9),
        recent_n: rng.gen_range(2..7),
        time_dim: rng.gen_range(2..5),
        channel_expansion: 2.0,
        window: if rng.gen_bool(0.5) {
            Some(rng.gen_range(10.0..60.0))
        } else {
            None
        },
        k_select: rng.gen_range(1..4),
        k_confounders: rng.gen_range(2..4),
        ..ModelConfig::default()
    };
    let mut model = SigModel::new(cfg, edge_dim, nodes, rng.gen())?;
    // zero biases put every padded token at the layer-norm singularity,
    // where a 1e-4 step is far outside the quadratic regime
    let ids: Vec<_> = model
        .params
        .ids()
        .filter(|&id| model.params.value(id).rank() == 1)
        .collect();
    for id in ids {
        for x in model.params.value_mut(id).data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    let links: Vec<Query> = (0..60).map(|i| Query::from(store.event(i))).collect();
    let k = model.config.k_confounders;
    model.dictionary = Some(fit_dictionary(&model, &store, &links, k, 50, rng.gen())?);
    let start = rng.gen_range(80..115);
    let groups = group_queries(&stream_queries(&store, start..start + 3, 2, &mut rng));
    let weights = LossWeights::new(1.0, rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0))?;
    loss_grad_check(
        &model,
        &store,
        &groups,
        &weights,
        GRAD_EPS,
        GRAD_TOL,
        3,
        rng.gen(),
    )
}

/// Per-op reports followed by the merged composite report.
pub fn full_grad_check(
    instances: usize,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = op_grad_checks(instances, seed)?;
    let mut composite = GradCheckReport {
        tolerance: GRAD_TOL,
        ..Default::default()
    };
    for i in 0..instances as u64 {
        composite.merge(composite_grad_check(seed.wrapping_add(i))?);
    }
    out.push((COMPOSITE, composite));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_composite_instances_pass() {
        for seed in 0..3 {
            let r = composite_grad_check(seed).unwrap();
            assert!(r.passed(), "seed {seed}: {:?}", r.failures);
            assert!(r.coordinates_checked > 20);
        }
    }
}
