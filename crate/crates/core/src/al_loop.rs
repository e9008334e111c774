//! The pool-based active-learning loop: train, sample masks, score, select
//! the top `G`, query answers, grow the training set, retrain.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bayes_mlp::{
    posterior_mean, predictive_matrices, sample_masks, train_epochs, Architecture,
    MaskedParameters, ModelParams, PredictiveMatrix, TrainOptions, TrainingSet,
};
use crate::datasets::{Dataset, DatasetSplit, ItemId};
use crate::error::{Error, Result};
use crate::scoring::{build_test_summary, score_passive, score_pool, ScoreVector, Strategy};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrainPolicy {
    WarmStart,
    FromScratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub masks: u64,
    pub selection: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlConfig {
    /// L.
    pub iterations: usize,
    /// M.
    pub samples: usize,
    /// G.
    pub query_batch: usize,
    pub hidden: [usize; 2],
    pub train: TrainOptions,
    pub strategy: Strategy,
    /// Defaults to from-scratch when `target_type` is set, warm-start otherwise.
    #[serde(default)]
    pub retrain: Option<RetrainPolicy>,
    pub seeds: Seeds,
    #[serde(default)]
    pub target_type: Option<String>,
}

impl AlConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iterations", self.iterations),
            ("samples", self.samples),
            ("query_batch", self.query_batch),
            ("epochs", self.train.epochs),
            ("batch_size", self.train.batch_size),
            ("hidden[0]", self.hidden[0]),
            ("hidden[1]", self.hidden[1]),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn retrain_policy(&self) -> RetrainPolicy {
        self.retrain.unwrap_or(if self.target_type.is_some() {
            RetrainPolicy::FromScratch
        } else {
            RetrainPolicy::WarmStart
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub ids: Vec<ItemId>,
    /// The whole remaining pool was taken.
    pub exhausts_pool: bool,
}

/// The `g` highest scores; ties go to the smaller item id.
pub fn select_top_g(scores: &ScoreVector, g: usize) -> Selection {
    let mut ranked: Vec<(ItemId, f64)> = scores.scores.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let exhausts_pool = g >= ranked.len();
    ranked.truncate(g);
    Selection {
        ids: ranked.into_iter().map(|(id, _)| id).collect(),
        exhausts_pool,
    }
}

/// Ground-truth lookup standing in for a human annotator. The only reader of
/// pool labels inside the loop.
#[derive(Debug)]
pub struct AnswerOracle<'a> {
    dataset: &'a Dataset,
    unqueried: BTreeSet<ItemId>,
}

impl<'a> AnswerOracle<'a> {
    pub fn new(dataset: &'a Dataset, pool: &[ItemId]) -> Self {
        AnswerOracle {
            dataset,
            unqueried: pool.iter().copied().collect(),
        }
    }

    /// Reveals labels for `ids`, each of which must still be unqueried.
    pub fn query_answers(&mut self, ids: &[ItemId]) -> Result<Vec<(ItemId, usize)>> {
        let mut seen = BTreeSet::new();
        for &id in ids {
            if !self.unqueried.contains(&id) || !seen.insert(id) {
                return Err(Error::invalid(format!(
                    "item {id} is not an unqueried pool item"
                )));
            }
        }
        ids.iter()
            .map(|&id| {
                self.unqueried.remove(&id);
                let label = self
                    .dataset
                    .label(id)
                    .ok_or_else(|| Error::invalid(format!("item {id} missing from dataset")))?;
                Ok((id, label))
            })
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.unqueried.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Training-set size of the model that was evaluated and used to score.
    pub train_size: usize,
    pub accuracy: f64,
    pub mask_seed: u64,
    pub selected: Vec<ItemId>,
    /// Selected items per question type, in dataset type order.
    pub type_counts: Vec<usize>,
    pub score_ms: f64,
    pub floored_divisions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub strategy: Strategy,
    pub split_digest: String,
    pub type_names: Vec<String>,
    pub initial_train: usize,
    /// `L + 1` rows; the last one evaluates the final model and selects nothing.
    pub records: Vec<IterationRecord>,
    /// Why the run stopped before `L` iterations, if it did.
    pub truncated: Option<String>,
}

impl ExperimentLog {
    pub fn all_selected(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.records.iter().flat_map(|r| r.selected.iter().copied())
    }

    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.accuracy)
    }

    /// `(queries so far, accuracy)` for every evaluated model.
    pub fn curve(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .map(|r| (r.train_size - self.initial_train, r.accuracy))
            .collect()
    }

    /// Fewest queries after which accuracy reached `target`.
    pub fn queries_to_reach(&self, target: f64) -> Option<usize> {
        self.curve()
            .into_iter()
            .find(|&(_, acc)| acc >= target)
            .map(|(q, _)| q)
    }

    pub fn iterations_header(&self) -> String {
        let mut cols = vec![
            "iteration".to_owned(),
            "train_size".into(),
            "accuracy".into(),
            "wallclock_score_ms".into(),
            "mask_seed".into(),
            "floored_divisions".into(),
        ];
        cols.extend(self.type_names.iter().map(|t| format!("count_{t}")));
        cols.join(",")
    }

    /// Per-iteration CSV. With `redact_wallclock` the timing column is left
    /// empty so that reruns compare byte for byte.
    pub fn write_iterations_csv<W: Write>(&self, mut w: W, redact_wallclock: bool) -> Result<()> {
        writeln!(w, "{}", self.iterations_header())?;
        for r in &self.records {
            let ms = if redact_wallclock {
                String::new()
            } else {
                format!("{:.3}", r.score_ms)
            };
            write!(
                w,
                "{},{},{:?},{ms},{},{}",
                r.iteration, r.train_size, r.accuracy, r.mask_seed, r.floored_divisions
            )?;
            for c in &r.type_counts {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// `iteration,item_ids` with space-separated ids.
    pub fn write_selected_ids<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,item_ids")?;
        for r in &self.records {
            let ids: Vec<String> = r.selected.iter().map(ItemId::to_string).collect();
            writeln!(w, "{},{}", r.iteration, ids.join(" "))?;
        }
        Ok(())
    }
}

struct Features {
    ids: Vec<ItemId>,
    inputs: Vec<Vec<f64>>,
}

impl Features {
    fn gather(dataset: &Dataset, ids: &[ItemId]) -> Result<Self> {
        let inputs =
            ids.iter()
                .map(|&id| {
                    dataset.item(id).map(|it| it.fused()).ok_or_else(|| {
                        Error::invalid(format!("split references unknown item {id}"))
                    })
                })
                .collect::<Result<_>>()?;
        Ok(Features {
            ids: ids.to_vec(),
            inputs,
        })
    }

    fn predict(
        &self,
        masks: &[MaskedParameters<'_>],
        keep: impl Fn(ItemId) -> bool,
    ) -> Result<Vec<PredictiveMatrix>> {
        let items: Vec<(ItemId, &[f64])> = self
            .ids
            .iter()
            .zip(&self.inputs)
            .filter(|(id, _)| keep(**id))
            .map(|(&id, x)| (id, x.as_slice()))
            .collect();
        predictive_matrices(masks, &items)
    }
}

/// Argmax of the posterior mean; ties go to the lower class.
pub fn predict_class(pm: &PredictiveMatrix) -> usize {
    let mean = posterior_mean(pm);
    let mut best = 0;
    for (c, &p) in mean.iter().enumerate() {
        if p > mean[best] {
            best = c;
        }
    }
    best
}

fn accuracy(pms: &[PredictiveMatrix], labels: &[usize]) -> f64 {
    if pms.is_empty() {
        return f64::NAN;
    }
    let hits = pms
        .iter()
        .zip(labels)
        .filter(|(pm, &y)| predict_class(pm) == y)
        .count();
    hits as f64 / pms.len() as f64
}

fn fit(
    cfg: &AlConfig,
    arch: &Architecture,
    start: Option<&ModelParams>,
    data: &TrainingSet,
    round: u64,
) -> Result<ModelParams> {
    let init;
    let base = match start {
        Some(p) => p,
        None => {
            init = ModelParams::init(arch, seed::derive(cfg.seeds.model, "init", round))?;
            &init
        }
    };
    Ok(train_epochs(
        base,
        data,
        &cfg.train,
        seed::derive(cfg.seeds.model, "train", round),
    )?
    .params)
}

/// Runs the full loop. The log is a pure function of the dataset, split and
/// `cfg` (apart from the wall-clock column).
pub fn run_experiment(
    cfg: &AlConfig,
    split: &DatasetSplit,
    dataset: &Dataset,
) -> Result<ExperimentLog> {
    run_experiment_with_model(cfg, split, dataset).map(|(log, _)| log)
}

/// Like [`run_experiment`], also returning the final model.
pub fn run_experiment_with_model(
    cfg: &AlConfig,
    split: &DatasetSplit,
    dataset: &Dataset,
) -> Result<(ExperimentLog, ModelParams)> {
    cfg.validate()?;
    split.validate()?;
    if cfg.strategy == Strategy::Goal && split.test_domain.is_empty() {
        return Err(Error::invalid("goal strategy needs a nonempty test domain"));
    }
    let meta = dataset.meta();
    let arch = Architecture {
        input_dim: meta.fused_dim(),
        hidden: cfg.hidden,
        classes: meta.classes,
    };

    let mut train = TrainingSet::new(meta.fused_dim());
    for &id in &split.initial_train {
        let item = dataset
            .item(id)
            .ok_or_else(|| Error::invalid(format!("unknown item {id}")))?;
        let label = dataset.label(id).expect("item exists");
        train.push(&item.fused(), label)?;
    }
    let eval = Features::gather(dataset, &split.eval)?;
    let eval_labels: Vec<usize> = split
        .eval
        .iter()
        .map(|&id| dataset.label(id).expect("item exists"))
        .collect();
    let pool_features = Features::gather(dataset, &split.pool)?;
    let test_features = Features::gather(dataset, &split.test_domain)?;

    let policy = cfg.retrain_policy();
    let mut params = fit(cfg, &arch, None, &train, 0)?;
    let mut oracle = AnswerOracle::new(dataset, &split.pool);
    let mut remaining: BTreeSet<ItemId> = split.pool.iter().copied().collect();
    let mut log = ExperimentLog {
        strategy: cfg.strategy,
        split_digest: split.digest(),
        type_names: meta.types.clone(),
        initial_train: split.initial_train.len(),
        records: Vec::with_capacity(cfg.iterations + 1),
        truncated: None,
    };

    for iteration in 0..=cfg.iterations {
        let mask_seed = seed::derive(cfg.seeds.masks, "masks", iteration as u64);
        let masks = sample_masks(&params, cfg.samples, mask_seed)?;
        let acc = accuracy(&eval.predict(&masks, |_| true)?, &eval_labels);
        let mut record = IterationRecord {
            iteration,
            train_size: train.len(),
            accuracy: acc,
            mask_seed,
            selected: Vec::new(),
            type_counts: vec![0; meta.types.len()],
            score_ms: 0.0,
            floored_divisions: 0,
        };
        if iteration == cfg.iterations {
            log.records.push(record);
            break;
        }
        if remaining.is_empty() {
            log.truncated = Some(format!("pool exhausted before iteration {iteration}"));
            log.records.push(record);
            break;
        }

        let started = Instant::now();
        let scores = match cfg.strategy {
            Strategy::Passive => {
                let ids: Vec<ItemId> = remaining.iter().copied().collect();
                score_passive(
                    &ids,
                    seed::derive(cfg.seeds.selection, "passive", iteration as u64),
                )?
            }
            Strategy::Goal => {
                let tests = test_features.predict(&masks, |_| true)?;
                let summary = build_test_summary(&tests)?;
                let pool = pool_features.predict(&masks, |id| remaining.contains(&id))?;
                let mut s = score_pool(Strategy::Goal, &pool, Some(&summary))?;
                s.meta.floored_divisions += summary.floored_divisions();
                s
            }
            other => {
                let pool = pool_features.predict(&masks, |id| remaining.contains(&id))?;
                score_pool(other, &pool, None)?
            }
        };
        record.score_ms = started.elapsed().as_secs_f64() * 1e3;
        record.floored_divisions = scores.meta.floored_divisions;
        drop(masks);

        let selection = select_top_g(&scores, cfg.query_batch);
        for (id, label) in oracle.query_answers(&selection.ids)? {
            let item = dataset.item(id).expect("pool item exists");
            record.type_counts[item.qtype] += 1;
            train.push(&item.fused(), label)?;
            remaining.remove(&id);
        }
        record.selected = selection.ids;
        log.records.push(record);

        let round = iteration as u64 + 1;
        params = match policy {
            RetrainPolicy::WarmStart => fit(cfg, &arch, Some(&params), &train, round)?,
            RetrainPolicy::FromScratch => fit(cfg, &arch, None, &train, round)?,
        };
        if selection.exhausts_pool && iteration + 1 < cfg.iterations {
            log::info!("pool exhausted at iteration {iteration}");
        }
    }
    Ok((log, params))
}

/// Pairwise selection overlap in percent; the diagonal is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl OverlapMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.values[i][j]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "strategy,{}", self.names.join(","))?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or_else(String::new, |x| format!("{x:.4}")))
                .collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Entry `(i, j) = |S_i ∩ S_j| / |S_i| · 100` over all selected ids.
pub fn overlap_matrix(logs: &[(&str, &ExperimentLog)]) -> Result<OverlapMatrix> {
    let Some((_, first)) = logs.first() else {
        return Err(Error::invalid("no logs to compare"));
    };
    for (name, log) in logs {
        if log.split_digest != first.split_digest {
            return Err(Error::invalid(format!(
                "log {name} was run on a different split"
            )));
        }
        if log.records.len() != first.records.len() {
            return Err(Error::invalid(format!(
                "log {name} has a different iteration count"
            )));
        }
    }
    let sets: Vec<BTreeSet<ItemId>> = logs
        .iter()
        .map(|(_, l)| l.all_selected().collect())
        .collect();
    let values = sets
        .iter()
        .enumerate()
        .map(|(i, si)| {
            sets.iter()
                .enumerate()
                .map(|(j, sj)| {
                    (i != j && !si.is_empty())
                        .then(|| si.intersection(sj).count() as f64 / si.len() as f64 * 100.0)
                })
                .collect()
        })
        .collect();
    Ok(OverlapMatrix {
        names: logs.iter().map(|(n, _)| (*n).to_owned()).collect(),
        values,
    })
}
