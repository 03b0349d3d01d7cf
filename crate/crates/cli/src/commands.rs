use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sig_core::bench::{bench_latency, bench_queries, bench_store};
use sig_core::checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
use sig_core::diagnostics::full_grad_check;
use sig_core::explain::{explanation_record, export_explanations, fidelity_curve};
use sig_core::graph::{
    load_events, write_events, CsvSchema, EventStore, LabeledQuery, NodeFeatures, DEFAULT_FRACTIONS,
};
use sig_core::ood::ood_inject;
use sig_core::planted::{planted_pattern_generate, PlantedConfig};
use sig_core::trainer::{eval_subset, evaluate, train, TrainData};

use crate::config::{show_features, FeatureChoice, RunConfig, DATASET_CONFIG, RUN_CONFIG};
use crate::data::{
    dataset_paths, feature_mode, load_dataset, write_queries, Dataset, EVENTS, QUERIES,
};
use crate::CliError;

pub const CHECKPOINT: &str = "checkpoint";
pub const METRICS: &str = "metrics.tsv";
pub const FIDELITY: &str = "fidelity.tsv";
pub const EXPLANATIONS: &str = "explanations.jsonl";

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let out = required(&cfg.out, "out")?;
    fs::create_dir_all(out)?;
    Ok(out)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::write(dir.join(RUN_CONFIG), cfg.render())?;
    Ok(())
}

fn attach(
    store: EventStore,
    features: &sig_core::graph::NodeFeatureMode,
) -> Result<EventStore, CliError> {
    let f = NodeFeatures::build(&store, features)?;
    Ok(store.with_node_features(f)?)
}

pub fn cmd_train(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = required(&cfg.data, "data")?.to_path_buf();
    cfg.model.validate()?;
    cfg.train.validate()?;
    let out = out_dir(&cfg)?.to_path_buf();
    let ds = load_dataset(&data, &cfg)?;
    let mode = feature_mode(&cfg.node_features, &ds.store, cfg.train.seed);
    cfg.node_features = FeatureChoice::Fixed(mode.clone());
    cfg.checkpoint = Some(out.join(CHECKPOINT));
    echo_config(&out, &cfg)?;

    let sets = ds.query_sets(&cfg);
    let store = attach(ds.store, &mode)?;
    let metrics = out.join(METRICS);
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let td = TrainData {
        store: &store,
        train: sets.train,
        val: sets.val,
    };
    let outcome = train(&td, &cfg.model, &cfg.train, Some(&metrics))?;
    let ckpt = Checkpoint {
        model: outcome.model,
        node_features: mode,
    };
    checkpoint_save(&ckpt, &out.join(CHECKPOINT))?;
    println!("best_epoch\t{}", outcome.best_epoch);
    println!("val_ap\t{}", outcome.best_val.ap);
    println!("val_auc\t{}", outcome.best_val.auc);
    Ok(())
}

/// Checkpoint plus dataset with the checkpoint's node features attached.
fn load_trained(cfg: &RunConfig) -> Result<(Checkpoint, Dataset), CliError> {
    let ckpt = checkpoint_load(required(&cfg.checkpoint, "checkpoint")?)?;
    let mut ds = load_dataset(required(&cfg.data, "data")?, cfg)?;
    ds.store = attach(ds.store, &ckpt.node_features)?;
    let m = &ckpt.model;
    if ds.store.feature_dim() != m.edge_dim
        || ds.store.node_features().map(|f| f.dim()) != Some(m.node_dim)
    {
        return Err(CliError::Runtime(format!(
            "data has edge/node feature widths {}/{}, checkpoint expects {}/{}",
            ds.store.feature_dim(),
            ds.store.node_features().map_or(0, |f| f.dim()),
            m.edge_dim,
            m.node_dim
        )));
    }
    Ok((ckpt, ds))
}

pub fn cmd_eval(cfg: RunConfig) -> Result<(), CliError> {
    let (ckpt, ds) = load_trained(&cfg)?;
    let sets = ds.query_sets(&cfg);
    println!("split\tap\tauc\tqueries");
    for (name, qs) in [("val", &sets.val), ("test", &sets.test), ("ood", &sets.ood)] {
        if qs.is_empty() {
            continue;
        }
        let qs = eval_subset(qs, cfg.train.max_eval_groups);
        let r = evaluate(&ckpt.model, &ds.store, &qs)?;
        println!("{name}\t{}\t{}\t{}", r.ap, r.auc, qs.len());
    }
    Ok(())
}

pub fn cmd_explain(cfg: RunConfig) -> Result<(), CliError> {
    if cfg.sparsity.is_empty() || cfg.sparsity.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
        return Err(CliError::Usage("sparsity levels must lie in (0, 1]".into()));
    }
    let (ckpt, ds) = load_trained(&cfg)?;
    let sets = ds.query_sets(&cfg);
    let pool = if sets.test.is_empty() {
        &sets.val
    } else {
        &sets.test
    };
    let qs: Vec<LabeledQuery> = eval_subset(pool, Some(cfg.explain_groups));
    let curve = fidelity_curve(&ckpt.model, &ds.store, &qs, &cfg.sparsity)?;
    let mut table = String::from("sparsity\tfidelity\tap_full\tap_residual\n");
    for p in &curve.points {
        table += &format!(
            "{}\t{}\t{}\t{}\n",
            p.sparsity, p.fidelity, p.ap_full, p.ap_residual
        );
    }
    table += &format!("aufsc\t{}\naufsc_raw\t{}\n", curve.aufsc, curve.aufsc_raw);
    print!("{table}");
    if cfg.out.is_some() {
        let out = out_dir(&cfg)?;
        echo_config(out, &cfg)?;
        fs::write(out.join(FIDELITY), &table)?;
        let mut records = Vec::new();
        for q in qs.iter().filter(|q| q.label) {
            for &s in &cfg.sparsity {
                records.push(explanation_record(&ckpt.model, &ds.store, q.query, s)?);
            }
        }
        export_explanations(&records, &out.join(EXPLANATIONS))?;
    }
    Ok(())
}

pub fn cmd_oodgen(cfg: RunConfig) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&cfg.scale) {
        return Err(CliError::Usage(format!(
            "--scale {} is outside [0, 1]",
            cfg.scale
        )));
    }
    let data = required(&cfg.data, "data")?;
    let out = out_dir(&cfg)?;
    let (events, queries) = dataset_paths(data);
    let schema = CsvSchema {
        bipartite: cfg.bipartite,
        node_count: cfg.nodes,
    };
    let store = load_events(&events, &schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (biased, stats) = ood_inject(&store, cfg.scale, &mut rng)?;
    write_events(&biased, out.join(EVENTS))?;
    if let Some(q) = queries {
        fs::copy(q, out.join(QUERIES))?;
    }
    // ids are written already offset, so the output is never bipartite
    let mut data_cfg = format!("nodes = {}\n", biased.node_count());
    if data.is_dir() && data.join(DATASET_CONFIG).exists() {
        for line in fs::read_to_string(data.join(DATASET_CONFIG))?.lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if key != "nodes" && key != "bipartite" {
                data_cfg += line;
                data_cfg.push('\n');
            }
        }
    }
    fs::write(out.join(DATASET_CONFIG), data_cfg)?;
    echo_config(out, &cfg)?;
    println!("events\t{}", biased.edge_count());
    println!("added\t{}", stats.added);
    println!("to_neighbors\t{}", stats.to_neighbors);
    Ok(())
}

pub fn cmd_synth(cfg: RunConfig) -> Result<(), CliError> {
    let out = out_dir(&cfg)?;
    let pc = PlantedConfig::new(cfg.synth_nodes, cfg.synth_horizon, cfg.rule, cfg.train.seed);
    let ds = planted_pattern_generate(&pc)?;
    let (train, val, test) = ds.split(DEFAULT_FRACTIONS)?;
    write_events(&ds.store, out.join(EVENTS))?;
    write_queries(
        &out.join(QUERIES),
        &[
            ("train", &train),
            ("val", &val),
            ("test", &test),
            ("ood", &ds.ood),
        ],
    )?;
    let features = show_features(&FeatureChoice::Fixed(ds.feature_mode()));
    fs::write(
        out.join(DATASET_CONFIG),
        format!(
            "nodes = {}\nnode_features = {features}\nwindow = {}\n",
            ds.store.node_count(),
            ds.config.window
        ),
    )?;
    echo_config(out, &cfg)?;
    println!("events\t{}", ds.store.edge_count());
    println!("queries\t{}", ds.queries.len());
    println!("ood_queries\t{}", ds.ood.len());
    println!("train_decoy_corr\t{}", ds.train_decoy_corr);
    println!("ood_decoy_corr\t{}", ds.ood_decoy_corr);
    Ok(())
}

pub fn cmd_gradcheck(cfg: RunConfig) -> Result<(), CliError> {
    if cfg.gradcheck_instances == 0 {
        return Err(CliError::Usage(
            "gradcheck_instances must be positive".into(),
        ));
    }
    let reports = full_grad_check(cfg.gradcheck_instances, cfg.train.seed)?;
    println!("op\tcoordinates\tskipped\tmax_rel_error\tstatus");
    let mut failed = Vec::new();
    for (name, r) in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{name}\t{}\t{}\t{:e}\t{status}",
            r.coordinates_checked,
            r.skipped,
            r.max_rel_error()
        );
        if !r.passed() {
            failed.push(*name);
        }
    }
    if cfg.out.is_some() {
        echo_config(out_dir(&cfg)?, &cfg)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_bench(cfg: RunConfig) -> Result<(), CliError> {
    if cfg.bench_ns.len() < 2 || cfg.bench_ns.contains(&0) {
        return Err(CliError::Usage(
            "bench_ns needs at least two positive values".into(),
        ));
    }
    let max_n = cfg.bench_ns.iter().copied().max().unwrap_or(1);
    let (nodes, clique) = (400, 4);
    let store = bench_store(nodes, clique, nodes * max_n, 8, cfg.train.seed)?;
    let queries = bench_queries(&store, clique, cfg.bench_queries, cfg.train.seed);
    let r = bench_latency(
        &store,
        &cfg.model,
        &cfg.bench_ns,
        &queries,
        cfg.bench_reps,
        cfg.train.seed,
    )?;
    println!("n\tper_edge_secs");
    for p in &r.points {
        println!("{}\t{:e}", p.n, p.per_edge_secs);
    }
    println!("slope\t{:e}", r.slope);
    println!("intercept\t{:e}", r.intercept);
    println!("r2\t{}", r.r2);
    if cfg.out.is_some() {
        echo_config(out_dir(&cfg)?, &cfg)?;
    }
    Ok(())
}
