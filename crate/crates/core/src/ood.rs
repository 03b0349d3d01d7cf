//! Distribution-shift injection for existing event streams.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Event, EventStore, NodeId};

/// Per-node summary of what [`ood_inject`] added.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InjectionStats {
    pub added: usize,
    pub to_neighbors: usize,
}

/// For every node `u` of degree `d`, adds `2d` events at times uniform over
/// `u`'s active window. Each one re-attaches to an existing neighbour of `u`
/// with probability `scale` and to a uniform non-neighbour otherwise; its
/// features are copied from a random event of `u`. Original events keep
/// their relative order and precede injected events at equal times.
pub fn ood_inject<R: Rng>(
    store: &EventStore,
    scale: f64,
    rng: &mut R,
) -> Result<(EventStore, InjectionStats)> {
    if !(scale > 0.0 && scale < 1.0) {
        return Err(invalid(format!("scale {scale} must lie in (0, 1)")));
    }
    let n = store.node_count();
    let mut added = Vec::new();
    let mut stats = InjectionStats::default();
    for u in 0..n {
        let inc = store.incident(u)?;
        if inc.is_empty() {
            continue;
        }
        let first = store.event(inc[0]).time;
        let last = store.event(inc[inc.len() - 1]).time;
        let mut nbrs: Vec<NodeId> = inc
            .iter()
            .map(|&i| store.event(i).other(u))
            .filter(|&x| x != u)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        nbrs.sort_unstable();
        let nbr_set: HashSet<NodeId> = nbrs.iter().copied().collect();
        // u itself and its neighbours are not valid non-neighbour targets
        let others = n - nbr_set.len() - 1;
        for _ in 0..2 * inc.len() {
            let t = if last > first {
                rng.gen_range(first..=last)
            } else {
                first
            };
            let to_nbr = !nbrs.is_empty() && (others == 0 || rng.gen_bool(scale));
            let dst = if to_nbr {
                nbrs[rng.gen_range(0..nbrs.len())]
            } else if others == 0 {
                continue;
            } else {
                loop {
                    let c = rng.gen_range(0..n);
                    if c != u && !nbr_set.contains(&c) {
                        break c;
                    }
                }
            };
            let template = store.event(inc[rng.gen_range(0..inc.len())]);
            added.push(Event::new(u, dst, t, template.features.clone()));
            stats.added += 1;
            stats.to_neighbors += to_nbr as usize;
        }
    }
    let mut events: Vec<Event> = store.events().to_vec();
    events.extend(added);
    let merged = EventStore::from_events(events, Some(n))?;
    let merged = match store.node_features() {
        Some(f) => merged.with_node_features(f.clone())?,
        None => merged,
    };
    Ok((merged, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(s: usize, d: usize, t: f64) -> Event {
        Event::new(s, d, t, vec![t, 1.0])
    }

    fn store() -> EventStore {
        let mut e = vec![ev(0, 1, 1.0), ev(0, 2, 2.0), ev(0, 3, 3.0), ev(4, 5, 4.0)];
        for i in 0..200 {
            e.push(ev(6 + i % 20, 6 + (i * 7 + 3) % 20, 5.0 + i as f64));
        }
        EventStore::from_events(e, Some(40)).unwrap()
    }

    #[test]
    fn degree_three_node_gets_six_events() {
        let s = store();
        let (out, stats) = ood_inject(&s, 0.6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let added = (0..out.edge_count()).filter(|&i| out.original_index(i) >= s.edge_count());
        assert_eq!(added.filter(|&i| out.event(i).src == 0).count(), 6);
        let total: usize = (0..s.node_count()).map(|u| 2 * s.degree(u)).sum();
        assert_eq!(stats.added, total);
        assert_eq!(out.edge_count(), s.edge_count() + total);
    }

    #[test]
    fn originals_are_unchanged_and_sorted() {
        let s = store();
        let (out, stats) = ood_inject(&s, 0.4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let orig: HashSet<usize> = (0..out.edge_count())
            .filter(|&i| out.original_index(i) < s.edge_count())
            .collect();
        let kept: Vec<&Event> = (0..out.edge_count())
            .filter(|i| orig.contains(i))
            .map(|i| out.event(i))
            .collect();
        assert_eq!(kept, s.events().iter().collect::<Vec<_>>());
        assert!(out.events().windows(2).all(|w| w[0].time <= w[1].time));
        assert_eq!(out.edge_count() - s.edge_count(), stats.added);
    }

    #[test]
    fn neighbor_fraction_matches_recount() {
        let s = store();
        for scale in [0.4, 0.6, 0.8] {
            let (out, stats) = ood_inject(&s, scale, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let mut recount = 0;
            for i in 0..out.edge_count() {
                if out.original_index(i) < s.edge_count() {
                    continue;
                }
                let e = out.event(i);
                if s.events()
                    .iter()
                    .any(|o| o.touches(e.src) && o.other(e.src) == e.dst && e.src != e.dst)
                {
                    recount += 1;
                }
            }
            assert_eq!(recount, stats.to_neighbors);
            let frac = stats.to_neighbors as f64 / stats.added as f64;
            let sd = (scale * (1.0 - scale) / stats.added as f64).sqrt();
            assert!((frac - scale).abs() < 4.0 * sd, "scale {scale}: {frac}");
        }
    }

    #[test]
    fn scale_must_be_a_proper_fraction() {
        let s = store();
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(ood_inject(&s, bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        }
    }
}
