//! Training loop, validation, and early stopping.

use std::fs::OpenOptions;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, relative_error, AdamConfig, GradCheckFailure, GradCheckReport, OptimizerState, Tape,
    Var,
};
use crate::confounders::{build_dictionary, cluster, ConfounderDictionary, DEFAULT_MAX_ITERS};
use crate::error::{invalid, Result, SigError};
use crate::graph::{EventStore, LabeledQuery, NodeId, Query};
use crate::heads::{total_loss, HeadOutputs, LossWeights};
use crate::metrics::{evaluate_ap_auc, ApAuc};
use crate::model::{ModelConfig, SigModel, TemporalSide};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Query groups (one positive and its negatives) per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub neg_ratio_train: usize,
    pub neg_ratio_eval: usize,
    pub seed: u64,
    pub lambdas: LossWeights,
    /// IID-only epochs before the confounder dictionary is built.
    pub warm_start_epochs: usize,
    /// Random per-epoch subset of training groups, kept in time order.
    pub max_train_groups: Option<usize>,
    /// Evenly spaced subset of validation groups.
    pub max_eval_groups: Option<usize>,
    /// Evenly spaced training positives embedded for clustering.
    pub dictionary_sample: Option<usize>,
    pub cluster_iters: usize,
    /// Groups recorded on one tape.
    pub chunk_groups: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 600,
            adam: AdamConfig::default(),
            patience: 5,
            neg_ratio_train: 5,
            neg_ratio_eval: 1,
            seed: 0,
            lambdas: LossWeights::default(),
            warm_start_epochs: 3,
            max_train_groups: None,
            max_eval_groups: None,
            dictionary_sample: None,
            cluster_iters: DEFAULT_MAX_ITERS,
            chunk_groups: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("neg_ratio_train", self.neg_ratio_train),
            ("neg_ratio_eval", self.neg_ratio_eval),
            ("cluster_iters", self.cluster_iters),
            ("chunk_groups", self.chunk_groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SigError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("max_train_groups", self.max_train_groups),
            ("max_eval_groups", self.max_eval_groups),
            ("dictionary_sample", self.dictionary_sample),
        ] {
            if v == Some(0) {
                return Err(SigError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.adam.lr > 0.0) || self.adam.weight_decay < 0.0 {
            return Err(SigError::Config(
                "learning rate must be positive, weight decay nonnegative".into(),
            ));
        }
        self.lambdas.validate()
    }
}

/// Where training queries come from.
#[derive(Clone, Debug)]
pub enum TrainQueries {
    /// Events in this range are positives; negatives are resampled every
    /// epoch by corrupting the destination.
    Stream(Range<usize>),
    /// Fixed labelled queries.
    Labeled(Vec<LabeledQuery>),
}

#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub store: &'a EventStore,
    pub train: TrainQueries,
    pub val: Vec<LabeledQuery>,
}

/// One source and time with its candidate destinations.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGroupSpec {
    pub src: NodeId,
    pub t0: f64,
    pub dsts: Vec<NodeId>,
    pub labels: Vec<bool>,
}

/// Merges consecutive queries that share source and time.
pub fn group_queries(qs: &[LabeledQuery]) -> Vec<QueryGroupSpec> {
    let mut out: Vec<QueryGroupSpec> = Vec::new();
    for q in qs {
        match out.last_mut() {
            Some(g) if g.src == q.query.src && g.t0 == q.query.t0 => {
                g.dsts.push(q.query.dst);
                g.labels.push(q.label);
            }
            _ => out.push(QueryGroupSpec {
                src: q.query.src,
                t0: q.query.t0,
                dsts: vec![q.query.dst],
                labels: vec![q.label],
            }),
        }
    }
    out
}

/// Each event in `range` followed by `ratio` corrupted copies.
pub fn stream_queries<R: Rng>(
    store: &EventStore,
    range: Range<usize>,
    ratio: usize,
    rng: &mut R,
) -> Vec<LabeledQuery> {
    let mut out = Vec::with_capacity(range.len() * (ratio + 1));
    for i in range {
        let e = store.event(i);
        out.push(LabeledQuery {
            query: Query::from(e),
            label: true,
        });
        for _ in 0..ratio {
            out.push(LabeledQuery {
                query: Query::new(e.src, store.sample_other(e.dst, rng), e.time),
                label: false,
            });
        }
    }
    out
}

/// [`stream_queries`] with its own generator, for evaluation sets that must
/// be rebuilt identically later.
pub fn fixed_queries(
    store: &EventStore,
    range: Range<usize>,
    ratio: usize,
    seed: u64,
) -> Vec<LabeledQuery> {
    stream_queries(store, range, ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `m` evenly spaced indices out of `n` (all of them when `m >= n`).
pub fn evenly_spaced(n: usize, m: usize) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    (0..m).map(|i| i * n / m).collect()
}

fn flatten(groups: &[QueryGroupSpec]) -> Vec<LabeledQuery> {
    groups
        .iter()
        .flat_map(|g| {
            g.dsts
                .iter()
                .zip(&g.labels)
                .map(|(&d, &label)| LabeledQuery {
                    query: Query::new(g.src, d, g.t0),
                    label,
                })
        })
        .collect()
}

/// The evenly spaced query groups that validation scores, at most `max`.
pub fn eval_subset(qs: &[LabeledQuery], max: Option<usize>) -> Vec<LabeledQuery> {
    let groups = group_queries(qs);
    let keep: Vec<QueryGroupSpec> = evenly_spaced(groups.len(), max.unwrap_or(usize::MAX))
        .into_iter()
        .map(|i| groups[i].clone())
        .collect();
    flatten(&keep)
}

/// AP and AUC of `y^I` over labelled queries.
pub fn evaluate(model: &SigModel, store: &EventStore, qs: &[LabeledQuery]) -> Result<ApAuc> {
    let queries: Vec<Query> = qs.iter().map(|q| q.query).collect();
    let labels: Vec<bool> = qs.iter().map(|q| q.label).collect();
    let scores = model.score(store, &queries)?;
    evaluate_ap_auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: ApAuc,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: SigModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: ApAuc,
    /// The validation queries actually scored.
    pub val_queries: Vec<LabeledQuery>,
}

/// Training positives used to build the dictionary.
fn dictionary_links(data: &TrainData<'_>, cap: Option<usize>) -> Vec<Query> {
    let all: Vec<Query> = match &data.train {
        TrainQueries::Stream(r) => r
            .clone()
            .map(|i| Query::from(data.store.event(i)))
            .collect(),
        TrainQueries::Labeled(qs) => qs.iter().filter(|q| q.label).map(|q| q.query).collect(),
    };
    evenly_spaced(all.len(), cap.unwrap_or(all.len()))
        .into_iter()
        .map(|i| all[i])
        .collect()
}

pub fn fit_dictionary(
    model: &SigModel,
    store: &EventStore,
    links: &[Query],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<ConfounderDictionary> {
    if links.len() < k {
        return Err(SigError::Config(format!(
            "{} links cannot fill {k} confounder clusters",
            links.len()
        )));
    }
    let x = model.embed_links(store, links)?;
    let c = cluster(&x, k, iters, seed)?;
    build_dictionary(&c.assignments, &x, k)
}

fn check_finite(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SigError::NonFinite(what()))
    }
}

/// Selected temporal events per query, as `(u side, v side)`.
type SelectionKey = Vec<(Vec<usize>, Vec<usize>)>;

/// Records the summed loss of `groups` on `tape`.
fn record_loss(
    model: &SigModel,
    store: &EventStore,
    tape: &mut Tape<'_>,
    groups: &[QueryGroupSpec],
    weights: &LossWeights,
) -> Result<(Var, SelectionKey)> {
    let interventions = weights.uses_interventions();
    let prepared = groups
        .iter()
        .map(|g| model.prepare_group(store, g.src, g.t0, &g.dsts, None))
        .collect::<Result<Vec<_>>>()?;
    let vars = model.record(tape);
    let (mut iid, mut s, mut t, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut key = Vec::new();
    let picked = |side: &TemporalSide| {
        side.selected
            .iter()
            .map(|&i| side.events[i])
            .collect::<Vec<_>>()
    };
    for (g, p) in groups.iter().zip(&prepared) {
        for f in model.forward_group(tape, &vars, p, interventions)? {
            key.push((picked(&f.selection.u), picked(&f.selection.v)));
            iid.push(f.iid);
            s.extend(f.structural);
            t.extend(f.temporal);
        }
        labels.extend(g.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    }
    let cat = |tape: &mut Tape<'_>, v: &[Var]| {
        if v.is_empty() {
            Ok(None)
        } else {
            tape.concat(v, 0).map(Some)
        }
    };
    let out = HeadOutputs {
        iid: tape.concat(&iid, 0)?,
        structural: cat(tape, &s)?,
        temporal: cat(tape, &t)?,
    };
    Ok((total_loss(tape, &out, &labels, weights)?, key))
}

/// One optimizer step over `groups`. Returns the batch loss.
fn train_step(
    model: &mut SigModel,
    store: &EventStore,
    groups: &[QueryGroupSpec],
    weights: &LossWeights,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let batch_n: usize = groups.iter().map(|g| g.dsts.len()).sum();
    model.params.zero_grad();
    let mut batch_loss = 0.0;
    for chunk in groups.chunks(cfg.chunk_groups) {
        let chunk_n: usize = chunk.iter().map(|g| g.dsts.len()).sum();
        let grads = {
            let mut tape = Tape::with_params(&model.params);
            let (loss, _) = record_loss(model, store, &mut tape, chunk, weights)?;
            let loss = tape.scale(loss, chunk_n as f64 / batch_n as f64);
            batch_loss += tape.value(loss).item();
            tape.backward(loss)?
        };
        grads.accumulate_into(&mut model.params)?;
    }
    adam_step(&mut model.params, state, &cfg.adam);
    Ok(batch_loss)
}

/// Checks the gradient of the full query-to-loss computation against
/// central differences on up to `per_param` random coordinates of every
/// parameter tensor. Coordinates whose `±eps` evaluations change the
/// top-k selection straddle a discontinuity and are counted as skipped.
#[allow(clippy::too_many_arguments)]
pub fn loss_grad_check(
    model: &SigModel,
    store: &EventStore,
    groups: &[QueryGroupSpec],
    weights: &LossWeights,
    eps: f64,
    tol: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if groups.is_empty() {
        return Err(invalid("no query groups to check"));
    }
    let loss_at = |m: &SigModel| -> Result<(f64, SelectionKey)> {
        let mut tape = Tape::with_params(&m.params);
        let (l, key) = record_loss(m, store, &mut tape, groups, weights)?;
        Ok((tape.value(l).item(), key))
    };
    let (grads, base) = {
        let mut tape = Tape::with_params(&model.params);
        let (l, key) = record_loss(model, store, &mut tape, groups, weights)?;
        (tape.backward(l)?, key)
    };
    let mut analytic: Vec<Option<&[f64]>> = vec![None; model.params.len()];
    for (id, g) in grads.param_grads() {
        analytic[id.index()] = Some(g);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut report = GradCheckReport {
        tolerance: tol,
        ..Default::default()
    };
    for id in model.params.ids() {
        let numel = model.params.value(id).numel();
        let mut worst: f64 = 0.0;
        for i in sample(&mut rng, numel, per_param.min(numel)) {
            let orig = model.params.value(id).data()[i];
            work.params.value_mut(id).data_mut()[i] = orig + eps;
            let (plus, key_plus) = loss_at(&work)?;
            work.params.value_mut(id).data_mut()[i] = orig - eps;
            let (minus, key_minus) = loss_at(&work)?;
            work.params.value_mut(id).data_mut()[i] = orig;
            if key_plus != base || key_minus != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].map_or(0.0, |g| g[i]);
            let rel = relative_error(a, numeric);
            worst = worst.max(rel);
            report.coordinates_checked += 1;
            if !(rel < tol) {
                report.failures.push(GradCheckFailure {
                    input: id.index(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_input.push(worst);
    }
    Ok(report)
}

fn append_log(path: &Path, r: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(
        f,
        "{}\t{}\t{}\t{}",
        r.epoch, r.train_loss, r.val.ap, r.val.auc
    )?;
    Ok(())
}

/// Trains a fresh model. When `log` is given, one tab-separated line per
/// epoch is appended to it.
pub fn train(
    data: &TrainData<'_>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let store = data.store;
    let feats = store
        .node_features()
        .ok_or_else(|| invalid("store has no node features attached"))?;
    let mut model = SigModel::new(
        model_cfg.clone(),
        store.feature_dim(),
        feats.dim(),
        cfg.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5157));

    let fixed_train = match &data.train {
        TrainQueries::Stream(r) if r.is_empty() || r.end > store.edge_count() => {
            return Err(invalid(format!(
                "training range {r:?} is empty or out of bounds"
            )))
        }
        TrainQueries::Stream(_) => None,
        TrainQueries::Labeled(qs) if qs.is_empty() => return Err(invalid("empty training set")),
        TrainQueries::Labeled(qs) => Some(group_queries(qs)),
    };
    let val_queries = eval_subset(&data.val, cfg.max_eval_groups);

    let warm = cfg.warm_start_epochs.min(cfg.epochs);
    let iid_only = LossWeights::new(
        if cfg.lambdas.iid > 0.0 {
            cfg.lambdas.iid
        } else {
            1.0
        },
        0.0,
        0.0,
    )?;
    let mut state = OptimizerState::new(&model.params);
    let mut history = Vec::new();
    let mut best: Option<(usize, ApAuc, ParameterSet, Option<ConfounderDictionary>)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let needs_dict = cfg.lambdas.uses_interventions() && model.dictionary.is_none();
        if needs_dict && epoch > warm {
            let links = dictionary_links(data, cfg.dictionary_sample);
            model.dictionary = Some(fit_dictionary(
                &model,
                store,
                &links,
                model.config.k_confounders,
                cfg.cluster_iters,
                cfg.seed,
            )?);
        }
        let weights = if model.dictionary.is_some() || !cfg.lambdas.uses_interventions() {
            cfg.lambdas
        } else {
            iid_only
        };

        let groups = match &fixed_train {
            Some(g) => g.clone(),
            None => {
                let TrainQueries::Stream(r) = &data.train else {
                    unreachable!()
                };
                group_queries(&stream_queries(
                    store,
                    r.clone(),
                    cfg.neg_ratio_train,
                    &mut rng,
                ))
            }
        };
        let groups = match cfg.max_train_groups {
            Some(m) if m < groups.len() => {
                let mut idx = sample(&mut rng, groups.len(), m).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| groups[i].clone()).collect()
            }
            _ => groups,
        };

        let (mut loss_sum, mut batches) = (0.0, 0);
        for (b, batch) in groups.chunks(cfg.batch_size).enumerate() {
            let l = train_step(&mut model, store, batch, &weights, &mut state, cfg)?;
            loss_sum += check_finite(l, || format!("training loss at epoch {epoch}, batch {b}"))?;
            if !model.params.all_finite() {
                return Err(SigError::NonFinite(format!(
                    "parameters after epoch {epoch}, batch {b}"
                )));
            }
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val: evaluate(&model, store, &val_queries)?,
        };
        if let Some(p) = log {
            append_log(p, &record)?;
        }
        let improved = best.as_ref().is_none_or(|b| record.val.ap > b.1.ap);
        if improved {
            best = Some((
                epoch,
                record.val,
                model.params.clone(),
                model.dictionary.clone(),
            ));
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(record);
        // the dictionary epoch changes the objective; do not stop before it
        if stale >= cfg.patience
            && !(cfg.lambdas.uses_interventions() && model.dictionary.is_none())
        {
            break;
        }
    }

    let (best_epoch, best_val, params, dictionary) = best.expect("at least one epoch runs");
    model.params.copy_values_from(&params)?;
    model.dictionary = dictionary;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val,
        val_queries,
    })
}

/// `[n x l]` link embeddings as a plain tensor, for callers that cluster
/// on their own.
pub fn embed_training_links(
    model: &SigModel,
    data: &TrainData<'_>,
    cap: Option<usize>,
) -> Result<Tensor> {
    model.embed_links(data.store, &dictionary_links(data, cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Event, NodeFeatureMode};

    fn store() -> EventStore {
        let mut events = Vec::new();
        for i in 0..120 {
            let s = i % 8;
            let d = (s + 1 + (i / 8) % 2) % 8;
            events.push(Event::new(s, d, i as f64, vec![1.0]));
        }
        EventStore::from_events(events, Some(8))
            .unwrap()
            .default_node_features(&NodeFeatureMode::default())
            .unwrap()
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 4,
            recent_n: 4,
            time_dim: 3,
            channel_expansion: 2.0,
            k_select: 2,
            k_confounders: 2,
            ..ModelConfig::default()
        }
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            neg_ratio_train: 2,
            warm_start_epochs: 1,
            seed: 3,
            chunk_groups: 5,
            ..TrainConfig::default()
        }
    }

    fn data(s: &EventStore) -> TrainData<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        TrainData {
            store: s,
            train: TrainQueries::Stream(0..84),
            val: stream_queries(s, 84..102, 1, &mut rng),
        }
    }

    #[test]
    fn grouping_and_spacing() {
        let q = |s, d, t, l| LabeledQuery {
            query: Query::new(s, d, t),
            label: l,
        };
        let g = group_queries(&[
            q(0, 1, 1.0, true),
            q(0, 2, 1.0, false),
            q(0, 3, 2.0, true),
            q(0, 1, 1.0, false),
        ]);
        assert_eq!(g.len(), 3);
        assert_eq!(g[0].dsts, vec![1, 2]);
        assert_eq!(evenly_spaced(10, 3), vec![0, 3, 6]);
        assert_eq!(evenly_spaced(2, 5), vec![0, 1]);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let s = store();
        let mut m = SigModel::new(model_cfg(), 1, 8, 5).unwrap();
        let links: Vec<Query> = (0..60).map(|i| Query::from(s.event(i))).collect();
        m.dictionary = Some(fit_dictionary(&m, &s, &links, 2, 50, 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let groups = group_queries(&stream_queries(&s, 90..93, 2, &mut rng));
        let r =
            loss_grad_check(&m, &s, &groups, &LossWeights::default(), 1e-4, 1e-3, 4, 0).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        assert_eq!(r.per_input.len(), m.params.len());
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let s = store();
        let a = train(&data(&s), &model_cfg(), &train_cfg(), None).unwrap();
        let b = train(&data(&s), &model_cfg(), &train_cfg(), None).unwrap();
        for ((_, x), (_, y)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(x, y);
        }
        assert_eq!(a.history, b.history);
        assert!(a.model.dictionary.is_some());
    }

    #[test]
    fn best_epoch_is_kept_and_reproduced() {
        let s = store();
        let out = train(&data(&s), &model_cfg(), &train_cfg(), None).unwrap();
        let best = out
            .history
            .iter()
            .map(|r| r.val.ap)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.best_val.ap, best);
        assert_eq!(out.history[out.best_epoch - 1].val, out.best_val);
        let again = evaluate(&out.model, &s, &out.val_queries).unwrap();
        assert_eq!(again, out.best_val);
        assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn iid_only_run_builds_no_dictionary() {
        let s = store();
        let cfg = TrainConfig {
            lambdas: LossWeights::new(1.0, 0.0, 0.0).unwrap(),
            ..train_cfg()
        };
        let out = train(&data(&s), &model_cfg(), &cfg, None).unwrap();
        assert!(out.model.dictionary.is_none());
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let s = store();
        let mut d = data(&s);
        d.train = TrainQueries::Stream(0..0);
        assert!(train(&d, &model_cfg(), &train_cfg(), None).is_err());
        d.train = TrainQueries::Labeled(vec![]);
        assert!(train(&d, &model_cfg(), &train_cfg(), None).is_err());
    }

    #[test]
    fn metrics_log_has_one_line_per_epoch() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.tsv");
        let out = train(&data(&s), &model_cfg(), &train_cfg(), Some(&p)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), out.history.len());
        assert!(text.lines().all(|l| l.split('\t').count() == 4));
    }
}
