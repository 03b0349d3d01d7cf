//! Continuous-time event store with per-node temporal adjacency.

mod features;
mod io;
mod query;
mod split;

use std::collections::HashSet;

use rand::Rng;

use crate::error::{invalid, Result, SigError};

pub use features::{landmark_features, NodeFeatureMode, NodeFeatures, DEFAULT_ONE_HOT_CAP};
pub use io::{load_events, parse_events, write_events, CsvSchema};
pub use query::EdgeSequence;
pub use split::{split_chronological, split_counts, SplitRanges, DEFAULT_FRACTIONS};

pub type NodeId = usize;

/// Event indices (positions in the sorted store) hidden from a query.
pub type ExcludedEvents = HashSet<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub src: NodeId,
    pub dst: NodeId,
    pub time: f64,
    pub features: Vec<f64>,
}

impl Event {
    pub fn new(src: NodeId, dst: NodeId, time: f64, features: Vec<f64>) -> Self {
        Event {
            src,
            dst,
            time,
            features,
        }
    }

    /// The endpoint opposite `node` (the node itself for a self-loop).
    pub fn other(&self, node: NodeId) -> NodeId {
        if self.src == node {
            self.dst
        } else {
            self.src
        }
    }

    pub fn touches(&self, node: NodeId) -> bool {
        self.src == node || self.dst == node
    }
}

/// A link-prediction query: does `src` interact with `dst` at `t0`?
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub src: NodeId,
    pub dst: NodeId,
    pub t0: f64,
}

impl Query {
    pub fn new(src: NodeId, dst: NodeId, t0: f64) -> Self {
        Query { src, dst, t0 }
    }
}

impl From<&Event> for Query {
    fn from(e: &Event) -> Self {
        Query::new(e.src, e.dst, e.time)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledQuery {
    pub query: Query,
    pub label: bool,
}

/// Immutable, time-sorted event stream. Every event appears in the
/// adjacency list of both endpoints (once for a self-loop), in time order.
#[derive(Clone, Debug)]
pub struct EventStore {
    events: Vec<Event>,
    original_index: Vec<usize>,
    node_count: usize,
    feature_dim: usize,
    adjacency: Vec<Vec<usize>>,
    node_features: Option<NodeFeatures>,
}

impl EventStore {
    /// Sorts `events` stably by time and builds the indices. `node_count`
    /// defaults to one past the largest id seen.
    pub fn from_events(events: Vec<Event>, node_count: Option<usize>) -> Result<Self> {
        if events.is_empty() {
            return Err(SigError::NoEvents);
        }
        let feature_dim = events[0].features.len();
        let mut max_id = 0;
        for (i, e) in events.iter().enumerate() {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(invalid(format!(
                    "event {i}: time {} is not a finite nonnegative number",
                    e.time
                )));
            }
            if e.features.len() != feature_dim {
                return Err(invalid(format!(
                    "event {i}: {} features, expected {feature_dim}",
                    e.features.len()
                )));
            }
            if e.features.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("event {i}: non-finite feature")));
            }
            max_id = max_id.max(e.src).max(e.dst);
        }
        let node_count = match node_count {
            Some(n) if n <= max_id => {
                return Err(invalid(format!("node id {max_id} exceeds node count {n}")));
            }
            Some(n) => n,
            None => max_id + 1,
        };
        let mut order: Vec<usize> = (0..events.len()).collect();
        order.sort_by(|&a, &b| events[a].time.total_cmp(&events[b].time));
        let mut slots: Vec<Option<Event>> = events.into_iter().map(Some).collect();
        let sorted: Vec<Event> = order
            .iter()
            .map(|&i| slots[i].take().expect("each index once"))
            .collect();

        let mut adjacency = vec![Vec::new(); node_count];
        for (idx, e) in sorted.iter().enumerate() {
            adjacency[e.src].push(idx);
            if e.dst != e.src {
                adjacency[e.dst].push(idx);
            }
        }
        Ok(EventStore {
            events: sorted,
            original_index: order,
            node_count,
            feature_dim,
            adjacency,
            node_features: None,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn event(&self, idx: usize) -> &Event {
        &self.events[idx]
    }

    /// Position of sorted event `idx` in the input sequence.
    pub fn original_index(&self, idx: usize) -> usize {
        self.original_index[idx]
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.events.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Incident event indices of `node`, ascending in time.
    pub fn incident(&self, node: NodeId) -> Result<&[usize]> {
        self.adjacency
            .get(node)
            .map(Vec::as_slice)
            .ok_or(SigError::UnknownNode(node))
    }

    pub fn degree(&self, node: NodeId) -> usize {
        self.adjacency.get(node).map_or(0, Vec::len)
    }

    pub fn node_features(&self) -> Option<&NodeFeatures> {
        self.node_features.as_ref()
    }

    pub fn with_node_features(mut self, features: NodeFeatures) -> Result<Self> {
        if features.node_count() != self.node_count {
            return Err(invalid(format!(
                "node features cover {} nodes, store has {}",
                features.node_count(),
                self.node_count
            )));
        }
        self.node_features = Some(features);
        Ok(self)
    }

    /// Attaches default node features (`x^n`).
    pub fn default_node_features(self, mode: &NodeFeatureMode) -> Result<Self> {
        let f = NodeFeatures::build(&self, mode)?;
        self.with_node_features(f)
    }

    pub fn time_span(&self) -> (f64, f64) {
        (self.events[0].time, self.events[self.events.len() - 1].time)
    }

    /// `ratio` negatives per positive: same source and time, destination
    /// uniform over all nodes other than the true destination.
    pub fn sample_negatives<R: Rng>(
        &self,
        positives: &[Event],
        ratio: usize,
        rng: &mut R,
    ) -> Result<Vec<Event>> {
        if ratio < 1 {
            return Err(invalid("negative ratio must be at least 1"));
        }
        if self.node_count < 2 {
            return Err(invalid("negative sampling needs at least two nodes"));
        }
        let mut out = Vec::with_capacity(positives.len() * ratio);
        for p in positives {
            for _ in 0..ratio {
                out.push(Event::new(
                    p.src,
                    self.sample_other(p.dst, rng),
                    p.time,
                    p.features.clone(),
                ));
            }
        }
        Ok(out)
    }

    /// Uniform node different from `exclude`.
    pub fn sample_other<R: Rng>(&self, exclude: NodeId, rng: &mut R) -> NodeId {
        let r = rng.gen_range(0..self.node_count - 1);
        if r >= exclude {
            r + 1
        } else {
            r
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn ev(src: usize, dst: usize, t: f64) -> Event {
        Event::new(src, dst, t, vec![])
    }

    #[test]
    fn sorts_stably_and_indexes_both_endpoints() {
        let store = EventStore::from_events(
            vec![ev(0, 1, 3.0), ev(1, 2, 1.0), ev(2, 0, 3.0), ev(2, 2, 2.0)],
            None,
        )
        .unwrap();
        let times: Vec<f64> = store.events().iter().map(|e| e.time).collect();
        assert_eq!(times, vec![1.0, 2.0, 3.0, 3.0]);
        // equal times keep input order
        assert_eq!(store.original_index(2), 0);
        assert_eq!(store.original_index(3), 2);
        assert_eq!(store.incident(2).unwrap(), &[0, 1, 3]);
        assert_eq!(store.incident(0).unwrap(), &[2, 3]);
        assert!(store.incident(9).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            EventStore::from_events(vec![], None),
            Err(SigError::NoEvents)
        ));
        assert!(EventStore::from_events(vec![ev(0, 1, -1.0)], None).is_err());
        assert!(EventStore::from_events(vec![ev(0, 1, f64::NAN)], None).is_err());
        let ragged = vec![
            Event::new(0, 1, 0.0, vec![1.0]),
            Event::new(0, 1, 1.0, vec![]),
        ];
        assert!(EventStore::from_events(ragged, None).is_err());
    }

    #[test]
    fn negatives_follow_ratio_and_seed() {
        let events: Vec<Event> = (0..10).map(|i| ev(i % 4, (i + 1) % 4, i as f64)).collect();
        let store = EventStore::from_events(events.clone(), Some(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = store.sample_negatives(&events, 5, &mut rng).unwrap();
        assert_eq!(neg.len(), 50);
        for (k, n) in neg.iter().enumerate() {
            let p = &events[k / 5];
            assert_eq!((n.src, n.time), (p.src, p.time));
            assert_ne!(n.dst, p.dst);
            assert!(n.dst < 6);
        }
        let one = store.sample_negatives(&events, 1, &mut rng).unwrap();
        assert_eq!(one.len(), events.len());
        let again = store
            .sample_negatives(&events, 5, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(neg, again);

        let single = EventStore::from_events(vec![ev(0, 0, 1.0)], None).unwrap();
        assert!(single
            .sample_negatives(&[ev(0, 0, 1.0)], 1, &mut rng)
            .is_err());
    }
}
