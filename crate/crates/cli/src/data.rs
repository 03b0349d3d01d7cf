//! Event files, synthetic dataset directories, and their query splits.
//!
//! A dataset is either an event CSV or a directory holding `events.csv`,
//! optionally `queries.csv` (`src,dst,t0,label,split`) and `dataset.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sig_core::graph::{
    load_events, split_chronological, CsvSchema, EventStore, LabeledQuery, NodeFeatureMode, Query,
    SplitRanges, DEFAULT_FRACTIONS, DEFAULT_ONE_HOT_CAP,
};
use sig_core::trainer::{fixed_queries, TrainQueries};

use crate::config::{FeatureChoice, RunConfig, AUTO_LANDMARKS};
use crate::CliError;

pub const EVENTS: &str = "events.csv";
pub const QUERIES: &str = "queries.csv";

const VAL_SALT: u64 = 0x7661_6c00;
const TEST_SALT: u64 = 0x7465_7374;

#[derive(Clone, Debug)]
pub enum Splits {
    /// Chronological event ranges with sampled negatives.
    Stream(SplitRanges),
    /// Fixed labelled queries.
    Labeled {
        train: Vec<LabeledQuery>,
        val: Vec<LabeledQuery>,
        test: Vec<LabeledQuery>,
        ood: Vec<LabeledQuery>,
    },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub store: EventStore,
    pub splits: Splits,
}

/// Queries every command scores, rebuilt identically from the config.
#[derive(Clone, Debug)]
pub struct QuerySets {
    pub train: TrainQueries,
    pub val: Vec<LabeledQuery>,
    pub test: Vec<LabeledQuery>,
    pub ood: Vec<LabeledQuery>,
}

/// `(events, queries)` paths for a file or directory dataset.
pub fn dataset_paths(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.is_dir() {
        let q = path.join(QUERIES);
        (path.join(EVENTS), q.exists().then_some(q))
    } else {
        (path.to_path_buf(), None)
    }
}

pub fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset, CliError> {
    let (events, queries) = dataset_paths(path);
    let schema = CsvSchema {
        bipartite: cfg.bipartite,
        node_count: cfg.nodes,
    };
    let store = load_events(&events, &schema)?;
    let splits = match queries {
        Some(q) => read_queries(&q)?,
        None => Splits::Stream(split_chronological(&store, DEFAULT_FRACTIONS)?),
    };
    Ok(Dataset { store, splits })
}

impl Dataset {
    pub fn query_sets(&self, cfg: &RunConfig) -> QuerySets {
        let (ratio, seed) = (cfg.train.neg_ratio_eval, cfg.train.seed);
        match &self.splits {
            Splits::Stream(r) => QuerySets {
                train: TrainQueries::Stream(r.train.clone()),
                val: fixed_queries(&self.store, r.val.clone(), ratio, seed ^ VAL_SALT),
                test: fixed_queries(&self.store, r.test.clone(), ratio, seed ^ TEST_SALT),
                ood: Vec::new(),
            },
            Splits::Labeled {
                train,
                val,
                test,
                ood,
            } => QuerySets {
                train: TrainQueries::Labeled(train.clone()),
                val: val.clone(),
                test: test.clone(),
                ood: ood.clone(),
            },
        }
    }
}

/// Resolves `auto` against the node count.
pub fn feature_mode(choice: &FeatureChoice, store: &EventStore, seed: u64) -> NodeFeatureMode {
    match choice {
        FeatureChoice::Fixed(m) => m.clone(),
        FeatureChoice::Auto if store.node_count() <= DEFAULT_ONE_HOT_CAP => {
            NodeFeatureMode::default()
        }
        FeatureChoice::Auto => NodeFeatureMode::Landmarks {
            count: AUTO_LANDMARKS.min(store.node_count()),
            seed,
        },
    }
}

pub fn write_queries(path: &Path, sets: &[(&str, &[LabeledQuery])]) -> Result<(), CliError> {
    let mut s = String::from("src,dst,t0,label,split\n");
    for (name, qs) in sets {
        for q in *qs {
            let _ = writeln!(
                s,
                "{},{},{},{},{name}",
                q.query.src,
                q.query.dst,
                q.query.t0,
                u8::from(q.label)
            );
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_queries(path: &Path) -> Result<Splits, CliError> {
    let text = fs::read_to_string(path)?;
    let (mut train, mut val, mut test, mut ood) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |what: &str| CliError::Runtime(format!("{}:{}: {what}", path.display(), i + 1));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let q = LabeledQuery {
            query: Query::new(
                f[0].parse().map_err(|_| bad("bad src"))?,
                f[1].parse().map_err(|_| bad("bad dst"))?,
                f[2].parse().map_err(|_| bad("bad t0"))?,
            ),
            label: match f[3] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            },
        };
        match f[4] {
            "train" => train.push(q),
            "val" => val.push(q),
            "test" => test.push(q),
            "ood" => ood.push(q),
            other => return Err(bad(&format!("unknown split `{other}`"))),
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: needs train and val queries",
            path.display()
        )));
    }
    Ok(Splits::Labeled {
        train,
        val,
        test,
        ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queries_file_keeps_splits_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(QUERIES);
        let q = |s, d, t: f64, label| LabeledQuery {
            query: Query::new(s, d, t),
            label,
        };
        let train = [q(0, 1, 1.5, true), q(0, 2, 1.5, false)];
        let val = [q(1, 2, 0.1 + 0.2, true)];
        let ood = [q(2, 0, 9.0, false)];
        write_queries(
            &p,
            &[
                ("train", &train),
                ("val", &val),
                ("test", &[]),
                ("ood", &ood),
            ],
        )
        .unwrap();
        let Splits::Labeled {
            train: a,
            val: b,
            test: c,
            ood: d,
        } = read_queries(&p).unwrap()
        else {
            panic!("expected labelled splits")
        };
        assert_eq!(a, train);
        assert_eq!(b, val);
        assert!(c.is_empty());
        assert_eq!(d, ood);
    }
}
