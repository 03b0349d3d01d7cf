//! `sig`: train, evaluate, and explain self-interpretable link predictors.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{read_pairs, RunConfig, RUN_CONFIG};
use data::dataset_paths;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<sig_core::error::SigError> for CliError {
    fn from(e: sig_core::error::SigError) -> Self {
        match e {
            sig_core::error::SigError::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sig",
    version,
    about = "Self-interpretable link prediction on event streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train on an event CSV or dataset directory; writes checkpoint and metrics.tsv
    Train,
    /// AP/AUC of a checkpoint on the validation, test and OOD queries
    Eval,
    /// Fidelity curve and AUFSC over a sparsity grid; optional JSONL export
    Explain,
    /// Inject biased events into a dataset
    Oodgen,
    /// Generate a planted-pattern dataset directory
    Synth,
    /// Finite-difference check of every op and the full loss
    Gradcheck,
    /// Per-edge latency against the recent-edge count N
    Bench,
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Event CSV or dataset directory
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// key = value file; overridden by flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated sparsity levels
    #[arg(long, global = true)]
    sparsity: Option<String>,
    #[arg(long, global = true)]
    scale: Option<f64>,
    #[arg(long = "lambda-i", global = true)]
    lambda_i: Option<f64>,
    #[arg(long = "lambda-t", global = true)]
    lambda_t: Option<f64>,
    #[arg(long = "lambda-s", global = true)]
    lambda_s: Option<f64>,
    #[arg(long = "k-confounders", global = true)]
    k_confounders: Option<usize>,
    #[arg(long = "recent-n", global = true)]
    recent_n: Option<usize>,
    #[arg(long, global = true)]
    hops: Option<usize>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long = "neg-ratio", global = true)]
    neg_ratio: Option<usize>,
    /// Any config key, as key=value; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    fn pairs(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()),
        );
        push("seed", self.seed.map(|v| v.to_string()));
        push("sparsity", self.sparsity.clone());
        push("scale", self.scale.map(|v| v.to_string()));
        push("lambda_i", self.lambda_i.map(|v| v.to_string()));
        push("lambda_t", self.lambda_t.map(|v| v.to_string()));
        push("lambda_s", self.lambda_s.map(|v| v.to_string()));
        push("k_confounders", self.k_confounders.map(|v| v.to_string()));
        push("recent_n", self.recent_n.map(|v| v.to_string()));
        push("hops", self.hops.map(|v| v.to_string()));
        push("hidden", self.hidden.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch", self.batch.map(|v| v.to_string()));
        push("neg_ratio", self.neg_ratio.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

/// Defaults, then dataset, run directory, `--config` file and flags.
fn resolve(flags: &Flags) -> Result<RunConfig, CliError> {
    let flag_pairs = flags.pairs()?;
    let file_pairs = match &flags.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let mut upper = RunConfig::default();
    upper.apply(&file_pairs)?;
    upper.apply(&flag_pairs)?;

    // a run directory's echoed config, minus its own output locations
    let run_pairs: Vec<(String, String)> = match upper.checkpoint.as_ref().and_then(|c| c.parent())
    {
        Some(dir) if dir.join(RUN_CONFIG).is_file() => read_pairs(&dir.join(RUN_CONFIG))?
            .into_iter()
            .filter(|(k, _)| k != "out" && k != "checkpoint")
            .collect(),
        _ => Vec::new(),
    };
    let mut probe = RunConfig::default();
    probe.apply(&run_pairs)?;
    let data = upper.data.clone().or(probe.data);

    let mut cfg = RunConfig::default();
    if let Some(d) = &data {
        let ds = d.join(config::DATASET_CONFIG);
        if d.is_dir() && ds.is_file() {
            cfg.apply(&read_pairs(&ds)?)?;
        }
        let (events, _) = dataset_paths(d);
        if !events.exists() {
            return Err(CliError::Usage(format!(
                "no event file at {}",
                events.display()
            )));
        }
    }
    cfg.apply(&run_pairs)?;
    cfg.apply(&file_pairs)?;
    cfg.apply(&flag_pairs)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.flags)?;
    match cli.command {
        Command::Train => commands::cmd_train(cfg),
        Command::Eval => commands::cmd_eval(cfg),
        Command::Explain => commands::cmd_explain(cfg),
        Command::Oodgen => commands::cmd_oodgen(cfg),
        Command::Synth => commands::cmd_synth(cfg),
        Command::Gradcheck => commands::cmd_gradcheck(cfg),
        Command::Bench => commands::cmd_bench(cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, CliError::Usage(_)) {
                1
            } else {
                2
            })
        }
    }
}
