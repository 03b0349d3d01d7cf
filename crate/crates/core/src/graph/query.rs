use std::collections::{HashSet, VecDeque};

use super::{EventStore, ExcludedEvents, NodeId};
use crate::error::{invalid, Result};

/// Up to `N` most recent events of a node strictly before `t0`, newest first.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSequence {
    pub node: NodeId,
    pub t0: f64,
    /// Store indices, newest first.
    pub events: Vec<usize>,
}

impl EdgeSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

fn hidden(excluded: Option<&ExcludedEvents>, idx: usize) -> bool {
    excluded.is_some_and(|x| x.contains(&idx))
}

impl EventStore {
    /// Incident events of `node` with `time < t0`, ascending.
    fn history(&self, node: NodeId, t0: f64) -> Result<&[usize]> {
        let inc = self.incident(node)?;
        let end = inc.partition_point(|&i| self.events[i].time < t0);
        Ok(&inc[..end])
    }

    pub fn recent_edges(
        &self,
        node: NodeId,
        t0: f64,
        n: usize,
        excluded: Option<&ExcludedEvents>,
    ) -> Result<EdgeSequence> {
        let events = self
            .history(node, t0)?
            .iter()
            .rev()
            .copied()
            .filter(|&i| !hidden(excluded, i))
            .take(n)
            .collect();
        Ok(EdgeSequence { node, t0, events })
    }

    /// Nodes within `hops` of `node` over events in `[t0 - window, t0)`,
    /// sorted ascending, excluding `node` itself.
    pub fn n_hop_neighbors(
        &self,
        node: NodeId,
        t0: f64,
        window: f64,
        hops: usize,
        excluded: Option<&ExcludedEvents>,
    ) -> Result<Vec<NodeId>> {
        if window.is_nan() || window < 0.0 {
            return Err(invalid(format!("window {window} must be nonnegative")));
        }
        let lo = t0 - window;
        let mut seen = HashSet::from([node]);
        let mut frontier = VecDeque::from([(node, 0usize)]);
        let mut out = Vec::new();
        while let Some((x, d)) = frontier.pop_front() {
            if d == hops {
                continue;
            }
            let hist = self.history(x, t0)?;
            let start = hist.partition_point(|&i| self.events[i].time < lo);
            for &i in &hist[start..] {
                if hidden(excluded, i) {
                    continue;
                }
                let y = self.events[i].other(x);
                if seen.insert(y) {
                    out.push(y);
                    frontier.push_back((y, d + 1));
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}
