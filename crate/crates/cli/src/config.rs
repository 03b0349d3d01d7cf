//! Flat `key = value` run configuration.
//!
//! Layers, lowest first: built-in defaults, a data directory's
//! `dataset.txt`, the `config.txt` next to a checkpoint, `--config`, flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sig_core::graph::{NodeFeatureMode, DEFAULT_ONE_HOT_CAP};
use sig_core::model::ModelConfig;
use sig_core::planted::PlantedRule;
use sig_core::trainer::TrainConfig;

use crate::CliError;

pub const RUN_CONFIG: &str = "config.txt";
pub const DATASET_CONFIG: &str = "dataset.txt";

/// Landmark count when `node_features = auto` and one-hot would be too wide.
pub const AUTO_LANDMARKS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureChoice {
    Auto,
    Fixed(NodeFeatureMode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub node_features: FeatureChoice,
    /// Node count for CSV ingestion; inferred when absent.
    pub nodes: Option<usize>,
    pub bipartite: bool,
    pub sparsity: Vec<f64>,
    pub scale: f64,
    /// Query groups explained per run.
    pub explain_groups: usize,
    pub synth_nodes: usize,
    pub synth_horizon: f64,
    pub rule: PlantedRule,
    pub gradcheck_instances: usize,
    pub bench_ns: Vec<usize>,
    pub bench_queries: usize,
    pub bench_reps: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            node_features: FeatureChoice::Auto,
            nodes: None,
            bipartite: false,
            sparsity: sig_core::explain::DEFAULT_SPARSITY_GRID.to_vec(),
            scale: 0.5,
            explain_groups: 200,
            synth_nodes: 2000,
            synth_horizon: 1.0e6,
            rule: PlantedRule::TriadicClosure,
            gradcheck_instances: 100,
            bench_ns: sig_core::bench::DEFAULT_BENCH_NS.to_vec(),
            bench_queries: 100,
            bench_reps: 3,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{v}`")))
}

fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, CliError> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn path(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "none".into(), ToString::to_string)
}

fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_features(v: &str) -> Result<FeatureChoice, CliError> {
    let bad = || {
        CliError::Usage(format!("`node_features`: expected auto, onehot, landmarks:<count>[:<seed>] or leading:<count>, got `{v}`"))
    };
    let parts: Vec<&str> = v.split(':').collect();
    let n = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Ok(match parts.as_slice() {
        ["auto"] => FeatureChoice::Auto,
        ["onehot"] => FeatureChoice::Fixed(NodeFeatureMode::OneHot {
            cap: DEFAULT_ONE_HOT_CAP,
        }),
        ["onehot", c] => FeatureChoice::Fixed(NodeFeatureMode::OneHot { cap: n(c)? }),
        ["landmarks", c] => FeatureChoice::Fixed(NodeFeatureMode::Landmarks {
            count: n(c)?,
            seed: 0,
        }),
        ["landmarks", c, s] => FeatureChoice::Fixed(NodeFeatureMode::Landmarks {
            count: n(c)?,
            seed: s.parse().map_err(|_| bad())?,
        }),
        ["leading", c] => FeatureChoice::Fixed(NodeFeatureMode::LeadingOneHot { distinct: n(c)? }),
        _ => return Err(bad()),
    })
}

pub fn show_features(f: &FeatureChoice) -> String {
    match f {
        FeatureChoice::Auto => "auto".into(),
        FeatureChoice::Fixed(NodeFeatureMode::OneHot { cap }) => format!("onehot:{cap}"),
        FeatureChoice::Fixed(NodeFeatureMode::Landmarks { count, seed }) => {
            format!("landmarks:{count}:{seed}")
        }
        FeatureChoice::Fixed(NodeFeatureMode::LeadingOneHot { distinct }) => {
            format!("leading:{distinct}")
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "hidden" => m.hidden = num(key, v)?,
            "recent_n" => m.recent_n = num(key, v)?,
            "time_dim" => m.time_dim = num(key, v)?,
            "token_expansion" => m.token_expansion = num(key, v)?,
            "channel_expansion" => m.channel_expansion = num(key, v)?,
            "hops" => m.hops = num(key, v)?,
            "window" => m.window = opt(key, v)?,
            "k_select" => m.k_select = num(key, v)?,
            "k_confounders" => m.k_confounders = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch" => t.batch_size = num(key, v)?,
            "lr" => t.adam.lr = num(key, v)?,
            "weight_decay" => t.adam.weight_decay = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "neg_ratio" => t.neg_ratio_train = num(key, v)?,
            "neg_ratio_eval" => t.neg_ratio_eval = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "lambda_i" => t.lambdas.iid = num(key, v)?,
            "lambda_t" => t.lambdas.temporal = num(key, v)?,
            "lambda_s" => t.lambdas.structural = num(key, v)?,
            "warm_start_epochs" => t.warm_start_epochs = num(key, v)?,
            "max_train_groups" => t.max_train_groups = opt(key, v)?,
            "max_eval_groups" => t.max_eval_groups = opt(key, v)?,
            "dictionary_sample" => t.dictionary_sample = opt(key, v)?,
            "cluster_iters" => t.cluster_iters = num(key, v)?,
            "chunk_groups" => t.chunk_groups = num(key, v)?,
            "node_features" => self.node_features = parse_features(v)?,
            "nodes" => self.nodes = opt(key, v)?,
            "bipartite" => self.bipartite = num(key, v)?,
            "sparsity" => self.sparsity = list(key, v)?,
            "scale" => self.scale = num(key, v)?,
            "explain_groups" => self.explain_groups = num(key, v)?,
            "synth_nodes" => self.synth_nodes = num(key, v)?,
            "synth_horizon" => self.synth_horizon = num(key, v)?,
            "rule" => {
                self.rule = v
                    .parse()
                    .map_err(|e| CliError::Usage(format!("`rule`: {e}")))?
            }
            "gradcheck_instances" => self.gradcheck_instances = num(key, v)?,
            "bench_ns" => self.bench_ns = list(key, v)?,
            "bench_queries" => self.bench_queries = num(key, v)?,
            "bench_reps" => self.bench_reps = num(key, v)?,
            "data" => self.data = path(v),
            "out" => self.out = path(v),
            "checkpoint" => self.checkpoint = path(v),
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), CliError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string())
        };
        let rows: Vec<(&str, String)> = vec![
            ("hidden", m.hidden.to_string()),
            ("recent_n", m.recent_n.to_string()),
            ("time_dim", m.time_dim.to_string()),
            ("token_expansion", m.token_expansion.to_string()),
            ("channel_expansion", m.channel_expansion.to_string()),
            ("hops", m.hops.to_string()),
            ("window", show_opt(&m.window)),
            ("k_select", m.k_select.to_string()),
            ("k_confounders", m.k_confounders.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch", t.batch_size.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("weight_decay", t.adam.weight_decay.to_string()),
            ("patience", t.patience.to_string()),
            ("neg_ratio", t.neg_ratio_train.to_string()),
            ("neg_ratio_eval", t.neg_ratio_eval.to_string()),
            ("seed", t.seed.to_string()),
            ("lambda_i", t.lambdas.iid.to_string()),
            ("lambda_t", t.lambdas.temporal.to_string()),
            ("lambda_s", t.lambdas.structural.to_string()),
            ("warm_start_epochs", t.warm_start_epochs.to_string()),
            ("max_train_groups", show_opt(&t.max_train_groups)),
            ("max_eval_groups", show_opt(&t.max_eval_groups)),
            ("dictionary_sample", show_opt(&t.dictionary_sample)),
            ("cluster_iters", t.cluster_iters.to_string()),
            ("chunk_groups", t.chunk_groups.to_string()),
            ("node_features", show_features(&self.node_features)),
            ("nodes", show_opt(&self.nodes)),
            ("bipartite", self.bipartite.to_string()),
            ("sparsity", show_list(&self.sparsity)),
            ("scale", self.scale.to_string()),
            ("explain_groups", self.explain_groups.to_string()),
            ("synth_nodes", self.synth_nodes.to_string()),
            ("synth_horizon", self.synth_horizon.to_string()),
            ("rule", self.rule.to_string()),
            ("gradcheck_instances", self.gradcheck_instances.to_string()),
            ("bench_ns", show_list(&self.bench_ns)),
            ("bench_queries", self.bench_queries.to_string()),
            ("bench_reps", self.bench_reps.to_string()),
            ("data", path(&self.data)),
            ("out", path(&self.out)),
            ("checkpoint", path(&self.checkpoint)),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(CliError::Usage(format!(
                "line {}: empty key or value",
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    parse_pairs(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
