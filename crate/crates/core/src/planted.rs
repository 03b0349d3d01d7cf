//! Synthetic event streams with a planted causal rule and a decoy.
//!
//! Every query is an episode: for positives the rule's pattern is laid down
//! in the window before `t0` and the link itself is emitted at `t0`; for
//! negatives only a look-alike partial pattern is laid down. Independently,
//! the destination may touch a hub node shortly before `t0` (the decoy).
//! The decoy tracks the label in the in-distribution period and is balanced
//! across labels in the trailing OOD period.

use std::collections::HashSet;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result, SigError};
use crate::graph::{Event, EventStore, LabeledQuery, NodeFeatureMode, NodeId, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlantedRule {
    /// `u-w` and `w-v` both inside the window.
    TriadicClosure,
    /// At least `BURST` events of `v` inside the window.
    RecencyBurst,
}

const BURST: usize = 3;

impl std::fmt::Display for PlantedRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlantedRule::TriadicClosure => "triadic_closure",
            PlantedRule::RecencyBurst => "recency_burst",
        })
    }
}

impl FromStr for PlantedRule {
    type Err = SigError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triadic_closure" | "triadic" => Ok(PlantedRule::TriadicClosure),
            "recency_burst" | "burst" => Ok(PlantedRule::RecencyBurst),
            _ => Err(invalid(format!("unknown rule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub nodes: usize,
    pub horizon: f64,
    pub rule: PlantedRule,
    pub seed: u64,
    /// Look-back window of the rule.
    pub window: f64,
    /// Look-back window of the decoy; short so episodes rarely overlap.
    pub decoy_window: f64,
    /// Positive episodes (negatives match 1:1).
    pub positives: usize,
    /// Middle nodes `w` of the triadic rule.
    pub brokers: usize,
    /// Decoy targets.
    pub hubs: usize,
    /// Uniform noise events among ordinary nodes.
    pub background: usize,
    /// Decoy rate among positives and negatives before the OOD period.
    pub decoy_pos: f64,
    pub decoy_neg: f64,
    /// Trailing share of the horizon where the decoy is balanced.
    pub ood_fraction: f64,
    /// Fail unless the in-distribution decoy correlation exceeds 0.6 and
    /// the OOD one stays below 0.05 in magnitude.
    pub enforce_decoy_targets: bool,
}

impl PlantedConfig {
    /// Sized for roughly 25 events per node.
    pub fn new(nodes: usize, horizon: f64, rule: PlantedRule, seed: u64) -> Self {
        let positives = nodes * 7 / 2;
        PlantedConfig {
            nodes,
            horizon,
            rule,
            seed,
            window: horizon / 200.0,
            decoy_window: horizon / 1000.0,
            positives,
            brokers: (nodes / 125).max(2),
            hubs: (nodes / 200).max(1),
            background: nodes * 5,
            decoy_pos: 0.9,
            decoy_neg: 0.05,
            ood_fraction: 0.15,
            enforce_decoy_targets: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nodes < self.brokers + self.hubs + 4 {
            return Err(invalid("too few nodes for brokers and hubs"));
        }
        if !(self.horizon > 0.0)
            || !(self.window > 0.0)
            || !(self.decoy_window > 0.0)
            || self.window * 4.0 > self.horizon
        {
            return Err(invalid(
                "window must be positive and well inside the horizon",
            ));
        }
        if self.positives < 4 {
            return Err(invalid("need at least four positive episodes"));
        }
        for p in [self.decoy_pos, self.decoy_neg] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("decoy rate {p} outside [0, 1]")));
            }
        }
        if !(self.ood_fraction > 0.0 && self.ood_fraction < 1.0) {
            return Err(invalid("ood_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    fn ood_start(&self) -> f64 {
        self.horizon * (1.0 - self.ood_fraction)
    }
}

#[derive(Clone, Debug)]
pub struct PlantedDataset {
    pub config: PlantedConfig,
    pub store: EventStore,
    /// In-distribution queries, time-ordered.
    pub queries: Vec<LabeledQuery>,
    /// Queries of the OOD period, time-ordered.
    pub ood: Vec<LabeledQuery>,
    pub train_decoy_corr: f64,
    pub ood_decoy_corr: f64,
}

/// Pearson correlation of two indicator sequences (0 when either is constant).
pub fn indicator_corr(a: &[bool], b: &[bool]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().filter(|&&x| x).count() as f64 / n;
    let mb = b.iter().filter(|&&x| x).count() as f64 / n;
    let cov = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64 / n - ma * mb;
    let den = (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        cov / den
    }
}

struct Roles {
    brokers: Vec<NodeId>,
    hubs: Vec<NodeId>,
    ordinary: Vec<NodeId>,
}

fn feat<R: Rng>(rng: &mut R) -> Vec<f64> {
    vec![1.0, rng.gen_range(-1.0..1.0)]
}

fn before<R: Rng>(t0: f64, window: f64, rng: &mut R) -> f64 {
    t0 - window * rng.gen_range(0.05..0.95)
}

impl PlantedDataset {
    /// Whether the rule's pattern is present for `q` in `store`.
    pub fn rule_holds(
        store: &EventStore,
        rule: PlantedRule,
        window: f64,
        q: Query,
    ) -> Result<bool> {
        match rule {
            PlantedRule::TriadicClosure => {
                let nu: HashSet<NodeId> = store
                    .n_hop_neighbors(q.src, q.t0, window, 1, None)?
                    .into_iter()
                    .collect();
                let nv = store.n_hop_neighbors(q.dst, q.t0, window, 1, None)?;
                Ok(nv
                    .iter()
                    .any(|w| *w != q.src && *w != q.dst && nu.contains(w)))
            }
            PlantedRule::RecencyBurst => {
                let inc = store.incident(q.dst)?;
                let n = inc
                    .iter()
                    .filter(|&&i| {
                        let t = store.event(i).time;
                        t < q.t0 && t >= q.t0 - window
                    })
                    .count();
                Ok(n >= BURST)
            }
        }
    }

    /// Whether `q.dst` touched a hub in the window before `t0`.
    pub fn decoy_present(&self, q: Query) -> Result<bool> {
        let hubs = &self.hubs();
        let nv = self
            .store
            .n_hop_neighbors(q.dst, q.t0, self.config.decoy_window, 1, None)?;
        Ok(nv.iter().any(|w| hubs.contains(w)))
    }

    pub fn hubs(&self) -> Vec<NodeId> {
        roles(&self.config).hubs
    }

    /// Brokers and hubs are told apart; ordinary nodes are interchangeable.
    pub fn feature_mode(&self) -> NodeFeatureMode {
        NodeFeatureMode::LeadingOneHot {
            distinct: self.config.brokers + self.config.hubs,
        }
    }
}

fn roles(cfg: &PlantedConfig) -> Roles {
    // fixed layout keeps roles recoverable from the config alone
    let brokers = (0..cfg.brokers).collect();
    let hubs = (cfg.brokers..cfg.brokers + cfg.hubs).collect();
    let ordinary = (cfg.brokers + cfg.hubs..cfg.nodes).collect();
    Roles {
        brokers,
        hubs,
        ordinary,
    }
}

/// Exactly `round(rate * n)` of `n` flags set, in random positions.
fn flags<R: Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<bool> {
    let k = (rate * n as f64).round() as usize;
    let mut v: Vec<bool> = (0..n).map(|i| i < k).collect();
    v.shuffle(rng);
    v
}

struct Episode {
    query: Query,
    label: bool,
}

pub fn planted_pattern_generate(cfg: &PlantedConfig) -> Result<PlantedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = roles(cfg);
    let pick = |rng: &mut ChaCha8Rng, pool: &[NodeId]| pool[rng.gen_range(0..pool.len())];
    let mut events = Vec::new();
    for _ in 0..cfg.background {
        let a = pick(&mut rng, &r.ordinary);
        let mut b = pick(&mut rng, &r.ordinary);
        while b == a {
            b = pick(&mut rng, &r.ordinary);
        }
        events.push(Event::new(
            a,
            b,
            rng.gen_range(0.0..cfg.horizon),
            feat(&mut rng),
        ));
    }

    let mut episodes = Vec::with_capacity(2 * cfg.positives);
    for i in 0..2 * cfg.positives {
        let label = i % 2 == 0;
        let t0 = rng.gen_range(cfg.window..cfg.horizon);
        let u = pick(&mut rng, &r.ordinary);
        let mut v = pick(&mut rng, &r.ordinary);
        while v == u {
            v = pick(&mut rng, &r.ordinary);
        }
        match cfg.rule {
            PlantedRule::TriadicClosure => {
                let w1 = pick(&mut rng, &r.brokers);
                let mut w2 = w1;
                if !label {
                    while w2 == w1 {
                        w2 = pick(&mut rng, &r.brokers);
                    }
                }
                events.push(Event::new(
                    u,
                    w1,
                    before(t0, cfg.window, &mut rng),
                    feat(&mut rng),
                ));
                events.push(Event::new(
                    w2,
                    v,
                    before(t0, cfg.window, &mut rng),
                    feat(&mut rng),
                ));
            }
            PlantedRule::RecencyBurst => {
                let burst = if label { BURST } else { 1 };
                for _ in 0..burst {
                    let w = pick(&mut rng, &r.ordinary);
                    events.push(Event::new(
                        w,
                        v,
                        before(t0, cfg.window, &mut rng),
                        feat(&mut rng),
                    ));
                }
                let w = pick(&mut rng, &r.ordinary);
                events.push(Event::new(
                    u,
                    w,
                    before(t0, cfg.window, &mut rng),
                    feat(&mut rng),
                ));
            }
        }
        if label {
            events.push(Event::new(u, v, t0, feat(&mut rng)));
        }
        episodes.push(Episode {
            query: Query::new(u, v, t0),
            label,
        });
    }

    // other episodes can complete a negative's pattern by accident
    let base = EventStore::from_events(events.clone(), Some(cfg.nodes))?;
    let mut kept = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let holds = PlantedDataset::rule_holds(&base, cfg.rule, cfg.window, ep.query)?;
        if holds == ep.label {
            kept.push(ep);
        } else if ep.label {
            return Err(invalid(format!(
                "planted positive {:?} lacks its pattern",
                ep.query
            )));
        }
    }
    kept.sort_by(|a, b| a.query.t0.total_cmp(&b.query.t0));

    // decoy assignment: exact rates per label within each period
    let ood_start = cfg.ood_start();
    let groups = [
        (false, true, cfg.decoy_pos),
        (false, false, cfg.decoy_neg),
        (true, true, 0.5),
        (true, false, 0.5),
    ];
    for (in_ood, label, rate) in groups {
        let idx: Vec<usize> = (0..kept.len())
            .filter(|&i| (kept[i].query.t0 >= ood_start) == in_ood && kept[i].label == label)
            .collect();
        for (k, on) in flags(idx.len(), rate, &mut rng).into_iter().enumerate() {
            if on {
                let q = kept[idx[k]].query;
                let h = pick(&mut rng, &r.hubs);
                events.push(Event::new(
                    q.dst,
                    h,
                    before(q.t0, cfg.decoy_window, &mut rng),
                    feat(&mut rng),
                ));
            }
        }
    }

    let store = EventStore::from_events(events, Some(cfg.nodes))?;
    let mut ds = PlantedDataset {
        config: cfg.clone(),
        store,
        queries: Vec::new(),
        ood: Vec::new(),
        train_decoy_corr: 0.0,
        ood_decoy_corr: 0.0,
    };
    for ep in kept {
        if PlantedDataset::rule_holds(&ds.store, cfg.rule, cfg.window, ep.query)? != ep.label {
            continue;
        }
        let lq = LabeledQuery {
            query: ep.query,
            label: ep.label,
        };
        if ep.query.t0 >= ood_start {
            ds.ood.push(lq);
        } else {
            ds.queries.push(lq);
        }
    }
    ds.train_decoy_corr = ds.decoy_corr(&ds.queries)?;
    ds.ood_decoy_corr = ds.decoy_corr(&ds.ood)?;
    if cfg.enforce_decoy_targets && (ds.train_decoy_corr <= 0.6 || ds.ood_decoy_corr.abs() >= 0.05)
    {
        return Err(invalid(format!(
            "decoy correlation off target: in-distribution {:.3}, OOD {:.3}",
            ds.train_decoy_corr, ds.ood_decoy_corr
        )));
    }
    Ok(ds)
}

impl PlantedDataset {
    /// Label-decoy correlation measured from the generated history.
    pub fn decoy_corr(&self, qs: &[LabeledQuery]) -> Result<f64> {
        let labels: Vec<bool> = qs.iter().map(|q| q.label).collect();
        let decoys = qs
            .iter()
            .map(|q| self.decoy_present(q.query))
            .collect::<Result<Vec<_>>>()?;
        Ok(indicator_corr(&labels, &decoys))
    }

    /// Splits the in-distribution queries chronologically.
    pub fn split(
        &self,
        fractions: (f64, f64, f64),
    ) -> Result<(Vec<LabeledQuery>, Vec<LabeledQuery>, Vec<LabeledQuery>)> {
        let r = crate::graph::split_counts(self.queries.len(), fractions)?;
        Ok((
            self.queries[r.train].to_vec(),
            self.queries[r.val].to_vec(),
            self.queries[r.test].to_vec(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rule: PlantedRule, seed: u64) -> PlantedConfig {
        PlantedConfig::new(400, 10_000.0, rule, seed)
    }

    #[test]
    fn labels_follow_the_rule_and_decoy_targets_hold() {
        for rule in [PlantedRule::TriadicClosure, PlantedRule::RecencyBurst] {
            let ds = planted_pattern_generate(&small(rule, 3)).unwrap();
            for q in ds.queries.iter().chain(&ds.ood) {
                assert_eq!(
                    PlantedDataset::rule_holds(&ds.store, rule, ds.config.window, q.query).unwrap(),
                    q.label
                );
            }
            assert!(ds.train_decoy_corr > 0.6);
            assert!(ds.ood_decoy_corr.abs() < 0.05);
            let pos = ds.queries.iter().filter(|q| q.label).count();
            assert!(pos * 2 >= ds.queries.len() - ds.queries.len() / 10);
        }
    }

    #[test]
    fn triadic_positive_has_both_legs() {
        let ds = planted_pattern_generate(&small(PlantedRule::TriadicClosure, 4)).unwrap();
        let q = ds.queries.iter().find(|q| q.label).unwrap().query;
        let w = ds.config.window;
        let a: HashSet<_> = ds
            .store
            .n_hop_neighbors(q.src, q.t0, w, 1, None)
            .unwrap()
            .into_iter()
            .collect();
        let b = ds.store.n_hop_neighbors(q.dst, q.t0, w, 1, None).unwrap();
        assert!(b.iter().any(|x| a.contains(x) && *x < ds.config.brokers));
        assert!(ds
            .store
            .events()
            .iter()
            .any(|e| e.time == q.t0 && e.touches(q.src) && e.touches(q.dst)));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = planted_pattern_generate(&small(PlantedRule::TriadicClosure, 5)).unwrap();
        let b = planted_pattern_generate(&small(PlantedRule::TriadicClosure, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        crate::graph::write_events(&a.store, &pa).unwrap();
        crate::graph::write_events(&b.store, &pb).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn correlation_helper() {
        assert_eq!(indicator_corr(&[true, false], &[true, false]), 1.0);
        assert_eq!(indicator_corr(&[true, false], &[false, true]), -1.0);
        assert_eq!(indicator_corr(&[true, true], &[false, true]), 0.0);
    }
}
