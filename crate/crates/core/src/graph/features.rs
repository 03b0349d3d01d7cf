use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EventStore, NodeId};
use crate::error::{invalid, Result};

pub const DEFAULT_ONE_HOT_CAP: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub enum NodeFeatureMode {
    OneHot {
        cap: usize,
    },
    /// Hop distances to `count` landmarks drawn with `seed`.
    Landmarks {
        count: usize,
        seed: u64,
    },
    /// One-hot for nodes below `distinct`; every other node shares one
    /// extra indicator column.
    LeadingOneHot {
        distinct: usize,
    },
}

impl Default for NodeFeatureMode {
    fn default() -> Self {
        NodeFeatureMode::OneHot {
            cap: DEFAULT_ONE_HOT_CAP,
        }
    }
}

/// Dense `node_count x dim` matrix of node features.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures {
    dim: usize,
    data: Vec<f64>,
}

impl NodeFeatures {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(invalid(format!(
                "{} values do not tile rows of width {dim}",
                data.len()
            )));
        }
        Ok(NodeFeatures { dim, data })
    }

    pub fn build(store: &EventStore, mode: &NodeFeatureMode) -> Result<Self> {
        let n = store.node_count();
        match *mode {
            NodeFeatureMode::OneHot { cap } => {
                if n > cap {
                    return Err(invalid(format!(
                        "{n} nodes exceed the one-hot cap of {cap}; use landmark features instead"
                    )));
                }
                let mut data = vec![0.0; n * n];
                for i in 0..n {
                    data[i * n + i] = 1.0;
                }
                NodeFeatures::new(n, data)
            }
            NodeFeatureMode::Landmarks { count, seed } => {
                if count == 0 || count > n {
                    return Err(invalid(format!("landmark count {count} not in 1..={n}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut marks = sample(&mut rng, n, count).into_vec();
                marks.sort_unstable();
                landmark_features(store, &marks)
            }
            NodeFeatureMode::LeadingOneHot { distinct } => {
                if distinct == 0 || distinct >= n {
                    return Err(invalid(format!("distinct count {distinct} not in 1..{n}")));
                }
                let dim = distinct + 1;
                let mut data = vec![0.0; n * dim];
                for i in 0..n {
                    data[i * dim + i.min(distinct)] = 1.0;
                }
                NodeFeatures::new(dim, data)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, node: NodeId) -> &[f64] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }
}

/// Shortest hop distance from every node to each landmark over the static
/// undirected graph of all events. Unreachable pairs get `node_count`.
pub fn landmark_features(store: &EventStore, landmarks: &[NodeId]) -> Result<NodeFeatures> {
    let n = store.node_count();
    if landmarks.is_empty() {
        return Err(invalid("no landmarks"));
    }
    let sentinel = n as f64;
    let m = landmarks.len();
    let mut data = vec![sentinel; n * m];
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for (j, &mark) in landmarks.iter().enumerate() {
        if mark >= n {
            return Err(invalid(format!("landmark {mark} out of range")));
        }
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[mark] = 0;
        queue.push_back(mark);
        while let Some(x) = queue.pop_front() {
            data[x * m + j] = dist[x] as f64;
            for &e in store.incident(x)? {
                let y = store.event(e).other(x);
                if dist[y] == usize::MAX {
                    dist[y] = dist[x] + 1;
                    queue.push_back(y);
                }
            }
        }
    }
    NodeFeatures::new(m, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Event;

    fn path_abc() -> EventStore {
        EventStore::from_events(
            vec![Event::new(0, 1, 1.0, vec![]), Event::new(1, 2, 2.0, vec![])],
            Some(4),
        )
        .unwrap()
    }

    #[test]
    fn one_hot_rows() {
        let s = EventStore::from_events(vec![Event::new(0, 2, 1.0, vec![])], None).unwrap();
        let f = NodeFeatures::build(&s, &NodeFeatureMode::default()).unwrap();
        assert_eq!(f.dim(), 3);
        for i in 0..3 {
            assert_eq!(f.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!(f.row(i)[i], 1.0);
        }
        assert!(NodeFeatures::build(&s, &NodeFeatureMode::OneHot { cap: 2 })
            .unwrap_err()
            .to_string()
            .contains("landmark"));
    }

    #[test]
    fn landmark_distances_on_a_path() {
        let s = path_abc();
        let f = landmark_features(&s, &[0, 2]).unwrap();
        assert_eq!(f.row(1), &[1.0, 1.0]);
        assert_eq!(f.row(0), &[0.0, 2.0]);
        // node 3 is isolated
        assert_eq!(f.row(3), &[4.0, 4.0]);
    }

    #[test]
    fn leading_one_hot_shares_the_tail() {
        let s = path_abc();
        let f = NodeFeatures::build(&s, &NodeFeatureMode::LeadingOneHot { distinct: 2 }).unwrap();
        assert_eq!(f.dim(), 3);
        assert_eq!(f.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(f.row(2), f.row(3));
        assert_eq!(f.row(3), &[0.0, 0.0, 1.0]);
        assert!(NodeFeatures::build(&s, &NodeFeatureMode::LeadingOneHot { distinct: 4 }).is_err());
    }

    #[test]
    fn random_landmarks_are_seeded() {
        let s = path_abc();
        let mode = NodeFeatureMode::Landmarks { count: 2, seed: 9 };
        let a = NodeFeatures::build(&s, &mode).unwrap();
        let b = NodeFeatures::build(&s, &mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 2);
    }
}
