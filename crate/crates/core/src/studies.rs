//! Study runners: seeded rosters of loop runs, the sampling studies on a
//! trained model, their CSV outputs and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::al_loop::{
    overlap_matrix, run_experiment_with_model, AlConfig, ExperimentLog, RetrainPolicy, Seeds,
};
use crate::bayes_mlp::{
    predictive_matrices, sample_masks, ModelParams, PredictiveMatrix, TrainOptions,
};
use crate::datasets::{
    cheat_filter, generate_synthetic, make_split, Dataset, DatasetSplit, GeneratorConfig, ItemId,
    SplitSizes,
};
use crate::error::{Error, Result};
use crate::exact_oracle::{mi_exact, spearman_rho};
use crate::scoring::{
    build_test_summary, score_curiosity, score_entropy, score_goal_fast, Strategy,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Savings,
    Overlap,
    Goal,
    Convergence,
    Fastcheck,
}

impl StudyKind {
    pub const ALL: [StudyKind; 5] = [
        StudyKind::Savings,
        StudyKind::Overlap,
        StudyKind::Goal,
        StudyKind::Convergence,
        StudyKind::Fastcheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StudyKind::Savings => "savings",
            StudyKind::Overlap => "overlap",
            StudyKind::Goal => "goal",
            StudyKind::Convergence => "convergence",
            StudyKind::Fastcheck => "fastcheck",
        }
    }
}

impl std::str::FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StudyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown study {s:?}")))
    }
}

/// Loop settings shared by every run of a roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSettings {
    pub iterations: usize,
    pub samples: usize,
    pub query_batch: usize,
    pub hidden: [usize; 2],
    pub train: TrainOptions,
    #[serde(default)]
    pub retrain: Option<RetrainPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointSettings {
    /// Initial training sizes N to sweep; empty skips the sweep.
    #[serde(default)]
    pub initial_sizes: Vec<usize>,
    /// How many roster seeds (from the front) the sweep uses.
    #[serde(default = "one")]
    pub seeds: usize,
}

impl Default for BreakpointSettings {
    fn default() -> Self {
        BreakpointSettings {
            initial_sizes: Vec::new(),
            seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSettings {
    pub items: usize,
    /// The largest entry is the reference.
    pub sample_counts: Vec<usize>,
    pub repetitions: usize,
    pub test_size: usize,
    pub rho_target: f64,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        ConvergenceSettings {
            items: 200,
            sample_counts: vec![1, 2, 5, 10, 20, 50, 100, 200, 500],
            repetitions: 3,
            test_size: 200,
            rho_target: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastcheckSettings {
    pub items: usize,
    pub test_size: usize,
    pub sample_counts: Vec<usize>,
}

impl Default for FastcheckSettings {
    fn default() -> Self {
        FastcheckSettings {
            items: 200,
            test_size: 200,
            sample_counts: vec![2, 5, 10, 20, 50],
        }
    }
}

/// Everything a study needs; read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study: StudyKind,
    /// Load this dataset instead of generating one.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Model for the convergence and fastcheck studies. Without one, a
    /// curiosity run on the first roster seed trains it.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub target_type: Option<String>,
    pub generator: GeneratorConfig,
    pub split: SplitSizes,
    #[serde(rename = "loop")]
    pub al: LoopSettings,
    #[serde(default)]
    pub breakpoint: BreakpointSettings,
    #[serde(default)]
    pub convergence: ConvergenceSettings,
    #[serde(default)]
    pub fastcheck: FastcheckSettings,
}

fn one() -> usize {
    1
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    /// Parses `text` and applies `key.path=value` overrides before
    /// deserializing. Values are read as TOML, falling back to a string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: StudyConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed roster is empty".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies configured".into()));
        }
        for (name, path) in [("dataset", &self.dataset), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "{name} {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if self.study == StudyKind::Goal && self.target_type.is_none() {
            return Err(Error::Config("goal study needs target_type".into()));
        }
        if self.convergence.sample_counts.is_empty() || self.fastcheck.sample_counts.is_empty() {
            return Err(Error::Config("sample_counts must not be empty".into()));
        }
        self.al_config(Strategy::Passive, 0, None).validate()
    }

    pub fn al_config(
        &self,
        strategy: Strategy,
        roster_seed: u64,
        target: Option<&str>,
    ) -> AlConfig {
        AlConfig {
            iterations: self.al.iterations,
            samples: self.al.samples,
            query_batch: self.al.query_batch,
            hidden: self.al.hidden,
            train: self.al.train,
            strategy,
            retrain: self.al.retrain,
            seeds: roster_seeds(roster_seed),
            target_type: target.map(str::to_owned),
        }
    }

    /// The configured dataset file, or a freshly generated one.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(path) => Dataset::load(path),
            None => generate_synthetic(&self.generator),
        }
    }
}

/// Per-run seeds derived from one roster seed, shared by all strategies so
/// runs are paired.
pub fn roster_seeds(s: u64) -> Seeds {
    Seeds {
        model: seed::derive(s, "model", 0),
        masks: seed::derive(s, "masks", 0),
        selection: seed::derive(s, "selection", 0),
    }
}

pub fn split_seed(s: u64) -> u64 {
    seed::derive(s, "split", 0)
}

fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_override_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override {key}: {part} is not inside a table"))
        })?;
        if i + 1 == parts.len() {
            table.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = table
            .entry((*part).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    Err(Error::Config(format!(
        "empty override key in {assignment:?}"
    )))
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// One seed's worth of paired runs.
#[derive(Debug, Clone)]
pub struct RosterRun {
    pub seed: u64,
    pub split: DatasetSplit,
    pub logs: Vec<ExperimentLog>,
    pub models: Vec<ModelParams>,
}

impl RosterRun {
    pub fn log(&self, strategy: Strategy) -> Option<&ExperimentLog> {
        self.logs.iter().find(|l| l.strategy == strategy)
    }
}

/// Runs every configured strategy on the split of each roster seed.
pub fn run_roster(
    cfg: &StudyConfig,
    dataset: &Dataset,
    sizes: SplitSizes,
    seeds: &[u64],
    target: Option<&str>,
) -> Result<Vec<RosterRun>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let split = make_split(dataset, sizes, target, split_seed(s))?;
        let mut logs = Vec::new();
        let mut models = Vec::new();
        for &strategy in &cfg.strategies {
            log::info!("seed {s}: running {strategy}");
            let (log, params) =
                run_experiment_with_model(&cfg.al_config(strategy, s, target), &split, dataset)?;
            logs.push(log);
            models.push(params);
        }
        out.push(RosterRun {
            seed: s,
            split,
            logs,
            models,
        });
    }
    Ok(out)
}

/// Savings of one active run against its paired passive run.
#[derive(Debug, Clone, PartialEq)]
pub struct SavingsRow {
    pub seed: u64,
    pub strategy: Strategy,
    pub target_accuracy: f64,
    /// Queries passive needed to first reach its own final accuracy.
    pub passive_queries: usize,
    pub queries: Option<usize>,
}

impl SavingsRow {
    /// Percent fewer queries than passive; `None` if the target was never hit.
    pub fn savings_pct(&self) -> Option<f64> {
        let q = self.queries? as f64;
        let p = self.passive_queries as f64;
        Some(if p == 0.0 { 0.0 } else { 100.0 * (p - q) / p })
    }
}

pub fn savings_rows(runs: &[RosterRun]) -> Result<Vec<SavingsRow>> {
    let mut rows = Vec::new();
    for run in runs {
        let passive = run
            .log(Strategy::Passive)
            .ok_or_else(|| Error::Config("savings need a passive run".into()))?;
        let target = passive.final_accuracy();
        let passive_queries = passive
            .queries_to_reach(target)
            .expect("final accuracy is reached");
        for log in &run.logs {
            rows.push(SavingsRow {
                seed: run.seed,
                strategy: log.strategy,
                target_accuracy: target,
                passive_queries,
                queries: log.queries_to_reach(target),
            });
        }
    }
    Ok(rows)
}

/// Mean active–active and active–passive overlap across a roster.
pub fn overlap_means(runs: &[RosterRun]) -> Result<(f64, f64)> {
    let (mut aa, mut ap) = (Vec::new(), Vec::new());
    for run in runs {
        let named: Vec<(&str, &ExperimentLog)> =
            run.logs.iter().map(|l| (l.strategy.as_str(), l)).collect();
        let m = overlap_matrix(&named)?;
        for a in &run.logs {
            for b in &run.logs {
                if a.strategy == b.strategy || a.strategy == Strategy::Passive {
                    continue;
                }
                let v = m
                    .get(a.strategy.as_str(), b.strategy.as_str())
                    .expect("off-diagonal entry");
                if b.strategy == Strategy::Passive {
                    ap.push(v)
                } else {
                    aa.push(v)
                }
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok((mean(&aa), mean(&ap)))
}

/// Per-iteration fraction of selections with the target type.
pub fn composition(log: &ExperimentLog, target_type: &str) -> Result<Vec<f64>> {
    let idx = log
        .type_names
        .iter()
        .position(|t| t == target_type)
        .ok_or_else(|| Error::invalid(format!("unknown question type {target_type:?}")))?;
    Ok(log
        .records
        .iter()
        .filter(|r| !r.selected.is_empty())
        .map(|r| r.type_counts[idx] as f64 / r.selected.len() as f64)
        .collect())
}

/// Mean of `fractions` over 1-based iterations `from..=to`.
pub fn mean_fraction(fractions: &[f64], from: usize, to: usize) -> f64 {
    let window: Vec<f64> = fractions
        .iter()
        .skip(from - 1)
        .take(to + 1 - from)
        .copied()
        .collect();
    window.iter().sum::<f64>() / window.len().max(1) as f64
}

pub fn base_rate(dataset: &Dataset, split: &DatasetSplit, target_type: &str) -> f64 {
    let hits = split
        .pool
        .iter()
        .filter(|&&id| dataset.type_name(id) == Some(target_type))
        .count();
    hits as f64 / split.pool.len().max(1) as f64
}

/// Goal study output for one seed; `cheating` is passive on the filtered pool.
#[derive(Debug, Clone)]
pub struct GoalRun {
    pub roster: RosterRun,
    pub cheating: ExperimentLog,
    pub cheating_model: ModelParams,
    pub base_rate: f64,
}

pub fn run_goal_roster(
    cfg: &StudyConfig,
    dataset: &Dataset,
    seeds: &[u64],
) -> Result<Vec<GoalRun>> {
    let target = cfg
        .target_type
        .as_deref()
        .ok_or_else(|| Error::Config("goal study needs target_type".into()))?;
    let mut out = Vec::new();
    for roster in run_roster(cfg, dataset, cfg.split, seeds, Some(target))? {
        let filtered = cheat_filter(&roster.split, dataset, target)?;
        let (cheating, cheating_model) = run_experiment_with_model(
            &cfg.al_config(Strategy::Passive, roster.seed, Some(target)),
            &filtered,
            dataset,
        )?;
        let base_rate = base_rate(dataset, &roster.split, target);
        out.push(GoalRun {
            roster,
            cheating,
            cheating_model,
            base_rate,
        });
    }
    Ok(out)
}

/// Sampling studies: `(strategy, M, rep) -> scores` on a fixed item set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub items: Vec<ItemId>,
    pub sample_counts: Vec<usize>,
    pub repetitions: usize,
    /// Keyed by `(strategy, M, rep)`.
    pub scores: BTreeMap<(Strategy, usize, usize), Vec<f64>>,
    /// Spearman ρ against the reference count, keyed like `scores`.
    pub rho: BTreeMap<(Strategy, usize, usize), Option<f64>>,
}

pub const SAMPLING_STRATEGIES: [Strategy; 3] =
    [Strategy::Entropy, Strategy::Curiosity, Strategy::Goal];

impl ConvergenceReport {
    /// Median ρ over repetitions; a constant-score repetition counts as 0.
    pub fn median_rho(&self, strategy: Strategy, samples: usize) -> f64 {
        let mut v: Vec<f64> = (0..self.repetitions)
            .map(|r| self.rho[&(strategy, samples, r)].unwrap_or(0.0))
            .collect();
        v.sort_by(f64::total_cmp);
        median_sorted(&v)
    }

    /// Smallest sample count whose median ρ reaches `target`.
    pub fn min_samples(&self, strategy: Strategy, target: f64) -> Option<usize> {
        self.sample_counts
            .iter()
            .copied()
            .find(|&m| self.median_rho(strategy, m) >= target)
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn pick_items(ids: &[ItemId], count: usize, seed: u64) -> Vec<ItemId> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<ItemId> = ids
        .choose_multiple(&mut rng, count.min(ids.len()))
        .copied()
        .collect();
    picked.sort();
    picked
}

fn features(dataset: &Dataset, ids: &[ItemId]) -> Result<Vec<(ItemId, Vec<f64>)>> {
    ids.iter()
        .map(|&id| {
            dataset
                .item(id)
                .map(|it| (id, it.fused()))
                .ok_or_else(|| Error::invalid(format!("unknown item {id}")))
        })
        .collect()
}

fn predict(
    params: &ModelParams,
    samples: usize,
    mask_seed: u64,
    inputs: &[(ItemId, Vec<f64>)],
) -> Result<Vec<PredictiveMatrix>> {
    let masks = sample_masks(params, samples, mask_seed)?;
    let refs: Vec<(ItemId, &[f64])> = inputs.iter().map(|(id, x)| (*id, x.as_slice())).collect();
    predictive_matrices(&masks, &refs)
}

/// Scores a fixed random set of pool items under each sampling strategy at
/// every sample count, with disjoint mask seeds per `(M, rep)`.
pub fn convergence_study(
    params: &ModelParams,
    dataset: &Dataset,
    split: &DatasetSplit,
    settings: &ConvergenceSettings,
    root_seed: u64,
) -> Result<ConvergenceReport> {
    let reference = *settings
        .sample_counts
        .iter()
        .max()
        .ok_or_else(|| Error::Config("no sample counts".into()))?;
    let items = pick_items(
        &split.pool,
        settings.items,
        seed::derive(root_seed, "convergence-items", 0),
    );
    let tests = pick_items(
        &split.test_domain,
        settings.test_size,
        seed::derive(root_seed, "convergence-tests", 0),
    );
    if items.is_empty() || tests.is_empty() {
        return Err(Error::invalid(
            "convergence study needs pool and test-domain items",
        ));
    }
    let pool_x = features(dataset, &items)?;
    let test_x = features(dataset, &tests)?;

    let mut scores = BTreeMap::new();
    for rep in 0..settings.repetitions {
        for (mi, &m) in settings.sample_counts.iter().enumerate() {
            let mask_seed = seed::derive(root_seed, "convergence-masks", (rep * 1000 + mi) as u64);
            let pool = predict(params, m, mask_seed, &pool_x)?;
            let summary = build_test_summary(&predict(params, m, mask_seed, &test_x)?)?;
            scores.insert(
                (Strategy::Entropy, m, rep),
                pool.iter().map(score_entropy).collect(),
            );
            scores.insert(
                (Strategy::Curiosity, m, rep),
                pool.iter().map(score_curiosity).collect(),
            );
            let goal = pool
                .iter()
                .map(|pm| score_goal_fast(pm, &summary).map(|g| g.value))
                .collect::<Result<Vec<f64>>>()?;
            scores.insert((Strategy::Goal, m, rep), goal);
        }
    }
    let mut rho = BTreeMap::new();
    for (&(strategy, m, rep), s) in &scores {
        let r = spearman_rho(s, &scores[&(strategy, reference, rep)])?;
        rho.insert((strategy, m, rep), r);
    }
    Ok(ConvergenceReport {
        items,
        sample_counts: settings.sample_counts.clone(),
        repetitions: settings.repetitions,
        scores,
        rho,
    })
}

/// Fast goal score against exact mutual information at one sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct FastcheckPoint {
    pub samples: usize,
    pub item: ItemId,
    pub fast: f64,
    pub exact: f64,
}

pub fn fastcheck_study(
    params: &ModelParams,
    dataset: &Dataset,
    split: &DatasetSplit,
    settings: &FastcheckSettings,
    root_seed: u64,
) -> Result<(Vec<FastcheckPoint>, Vec<(usize, Option<f64>)>)> {
    let items = pick_items(
        &split.pool,
        settings.items,
        seed::derive(root_seed, "fastcheck-items", 0),
    );
    let tests = pick_items(
        &split.test_domain,
        settings.test_size.min(200),
        seed::derive(root_seed, "fastcheck-tests", 0),
    );
    if items.is_empty() || tests.is_empty() {
        return Err(Error::invalid(
            "fastcheck study needs pool and test-domain items",
        ));
    }
    let pool_x = features(dataset, &items)?;
    let test_x = features(dataset, &tests)?;
    let mut points = Vec::new();
    let mut rhos = Vec::new();
    for &m in &settings.sample_counts {
        let mask_seed = seed::derive(root_seed, "fastcheck-masks", m as u64);
        let pool = predict(params, m, mask_seed, &pool_x)?;
        let test = predict(params, m, mask_seed, &test_x)?;
        let summary = build_test_summary(&test)?;
        let (mut fast, mut exact) = (Vec::new(), Vec::new());
        for pm in &pool {
            let f = score_goal_fast(pm, &summary)?.value;
            let e = mi_exact(pm, &test)?;
            points.push(FastcheckPoint {
                samples: m,
                item: pm.item(),
                fast: f,
                exact: e,
            });
            fast.push(f);
            exact.push(e);
        }
        rhos.push((m, spearman_rho(&fast, &exact)?));
    }
    Ok((points, rhos))
}

/// Emitted CSV files and their declared headers.
#[derive(Debug, Clone, Copy)]
pub struct Schema {
    /// File-name prefix the schema applies to.
    pub prefix: &'static str,
    pub columns: &'static [&'static str],
    /// Extra trailing columns must start with this.
    pub trailing: Option<&'static str>,
}

pub const SCHEMAS: &[Schema] = &[
    Schema {
        prefix: "curve-",
        columns: &[
            "iteration",
            "train_size",
            "accuracy",
            "wallclock_score_ms",
            "mask_seed",
            "floored_divisions",
        ],
        trailing: Some("count_"),
    },
    Schema {
        prefix: "selected-",
        columns: &["iteration", "item_ids"],
        trailing: None,
    },
    Schema {
        prefix: "savings.csv",
        columns: &[
            "seed",
            "strategy",
            "target_accuracy",
            "passive_queries",
            "queries",
            "savings_pct",
        ],
        trailing: None,
    },
    Schema {
        prefix: "savings_summary.csv",
        columns: &[
            "strategy",
            "pairs",
            "pairs_saving_10pct",
            "mean_savings_pct",
        ],
        trailing: None,
    },
    Schema {
        prefix: "breakpoint.csv",
        columns: &[
            "initial_size",
            "seed",
            "strategy",
            "final_accuracy",
            "queries",
            "savings_pct",
        ],
        trailing: None,
    },
    Schema {
        prefix: "overlap-",
        columns: &["strategy"],
        trailing: Some(""),
    },
    Schema {
        prefix: "overlap_summary.csv",
        columns: &["active_active_pct", "active_passive_pct", "ratio"],
        trailing: None,
    },
    Schema {
        prefix: "composition.csv",
        columns: &[
            "seed",
            "strategy",
            "iteration",
            "target_fraction",
            "base_rate",
        ],
        trailing: None,
    },
    Schema {
        prefix: "goal_summary.csv",
        columns: &[
            "seed",
            "strategy",
            "final_accuracy",
            "mean_target_fraction",
            "base_rate",
        ],
        trailing: None,
    },
    Schema {
        prefix: "convergence.csv",
        columns: &["strategy", "samples", "repetition", "rho"],
        trailing: None,
    },
    Schema {
        prefix: "convergence_summary.csv",
        columns: &["strategy", "samples", "median_rho"],
        trailing: None,
    },
    Schema {
        prefix: "traces.csv",
        columns: &["strategy", "samples", "repetition", "item_id", "score"],
        trailing: None,
    },
    Schema {
        prefix: "fastcheck.csv",
        columns: &["samples", "item_id", "fast", "exact"],
        trailing: None,
    },
    Schema {
        prefix: "fastcheck_rho.csv",
        columns: &["samples", "rho"],
        trailing: None,
    },
];

/// Checks one CSV against the schema matching its file name.
pub fn validate_csv(path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let schema_err = |msg: String| Error::Schema {
        path: path.to_path_buf(),
        msg,
    };
    let schema = SCHEMAS
        .iter()
        .filter(|s| name.starts_with(s.prefix))
        .max_by_key(|s| s.prefix.len())
        .ok_or_else(|| schema_err("no declared schema for this file".into()))?;
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| schema_err("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < schema.columns.len() || cols[..schema.columns.len()] != *schema.columns {
        return Err(schema_err(format!(
            "header {header:?} does not start with {}",
            schema.columns.join(",")
        )));
    }
    match schema.trailing {
        None if cols.len() != schema.columns.len() => {
            return Err(schema_err(format!(
                "unexpected extra columns in {header:?}"
            )));
        }
        Some(p) => {
            if let Some(bad) = cols[schema.columns.len()..]
                .iter()
                .find(|c| !c.starts_with(p) || c.is_empty())
            {
                return Err(schema_err(format!("unexpected column {bad:?}")));
            }
        }
        None => {}
    }
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = line.split(',').count();
        if n != cols.len() {
            return Err(schema_err(format!(
                "line {}: {n} fields, header has {}",
                i + 2,
                cols.len()
            )));
        }
    }
    Ok(())
}

/// Validates every CSV below `dir`; returns how many were checked.
pub fn validate_outputs(dir: &Path) -> Result<usize> {
    let mut count = 0;
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                validate_csv(&p)?;
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Writes study outputs below a directory and remembers what it wrote.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write(&mut self, rel: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(rel.to_owned());
        Ok(())
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write_roster_logs(out: &mut OutputDir, runs: &[RosterRun], prefix: &str) -> Result<()> {
    for run in runs {
        for (log, model) in run.logs.iter().zip(&run.models) {
            let tag = format!("{prefix}{}-seed{}", log.strategy, run.seed);
            out.write(&format!("curves/curve-{tag}.csv"), |w| {
                log.write_iterations_csv(w, false)
            })?;
            out.write(&format!("selected/selected-{tag}.csv"), |w| {
                log.write_selected_ids(w)
            })?;
            out.write(&format!("checkpoints/{tag}.ckpt"), |w| {
                model.write_checkpoint(w)
            })?;
        }
    }
    Ok(())
}

fn write_savings(out: &mut OutputDir, rows: &[SavingsRow]) -> Result<()> {
    out.write("savings.csv", |w| {
        writeln!(
            w,
            "seed,strategy,target_accuracy,passive_queries,queries,savings_pct"
        )?;
        for r in rows {
            writeln!(
                w,
                "{},{},{:?},{},{},{}",
                r.seed,
                r.strategy,
                r.target_accuracy,
                r.passive_queries,
                opt(r.queries),
                opt(r.savings_pct().map(|s| format!("{s:.3}")))
            )?;
        }
        Ok(())
    })?;
    out.write("savings_summary.csv", |w| {
        writeln!(w, "strategy,pairs,pairs_saving_10pct,mean_savings_pct")?;
        for st in Strategy::ALL {
            let mine: Vec<&SavingsRow> = rows.iter().filter(|r| r.strategy == st).collect();
            if mine.is_empty() {
                continue;
            }
            let hits = mine
                .iter()
                .filter(|r| r.savings_pct().is_some_and(|s| s >= 10.0))
                .count();
            let found: Vec<f64> = mine.iter().filter_map(|r| r.savings_pct()).collect();
            let mean = if found.is_empty() {
                String::new()
            } else {
                format!("{:.3}", found.iter().sum::<f64>() / found.len() as f64)
            };
            writeln!(w, "{st},{},{hits},{mean}", mine.len())?;
        }
        Ok(())
    })
}

fn write_overlap(out: &mut OutputDir, runs: &[RosterRun]) -> Result<()> {
    for run in runs {
        let named: Vec<(&str, &ExperimentLog)> =
            run.logs.iter().map(|l| (l.strategy.as_str(), l)).collect();
        let m = overlap_matrix(&named)?;
        out.write(&format!("overlap-seed{}.csv", run.seed), |w| m.write_csv(w))?;
    }
    let (aa, ap) = overlap_means(runs)?;
    out.write("overlap_summary.csv", |w| {
        writeln!(w, "active_active_pct,active_passive_pct,ratio")?;
        writeln!(w, "{aa:.3},{ap:.3},{:.3}", aa / ap)?;
        Ok(())
    })
}

pub fn run_savings_study(cfg: &StudyConfig, out: &mut OutputDir) -> Result<()> {
    let dataset = cfg.dataset()?;
    let runs = run_roster(cfg, &dataset, cfg.split, &cfg.seeds, None)?;
    write_roster_logs(out, &runs, "")?;
    write_savings(out, &savings_rows(&runs)?)?;

    let sweep_seeds: Vec<u64> = cfg
        .seeds
        .iter()
        .copied()
        .take(cfg.breakpoint.seeds)
        .collect();
    let mut sweep = Vec::new();
    for &n in &cfg.breakpoint.initial_sizes {
        let sizes = SplitSizes {
            initial_train: n,
            ..cfg.split
        };
        let runs = run_roster(cfg, &dataset, sizes, &sweep_seeds, None)?;
        for row in savings_rows(&runs)? {
            let log = runs
                .iter()
                .find(|r| r.seed == row.seed)
                .and_then(|r| r.log(row.strategy))
                .expect("run exists");
            sweep.push((n, row, log.final_accuracy()));
        }
    }
    out.write("breakpoint.csv", |w| {
        writeln!(
            w,
            "initial_size,seed,strategy,final_accuracy,queries,savings_pct"
        )?;
        for (n, r, acc) in &sweep {
            writeln!(
                w,
                "{n},{},{},{acc:?},{},{}",
                r.seed,
                r.strategy,
                opt(r.queries),
                opt(r.savings_pct().map(|s| format!("{s:.3}")))
            )?;
        }
        Ok(())
    })
}

pub fn run_overlap_study(cfg: &StudyConfig, out: &mut OutputDir) -> Result<()> {
    let dataset = cfg.dataset()?;
    let runs = run_roster(cfg, &dataset, cfg.split, &cfg.seeds, None)?;
    write_roster_logs(out, &runs, "")?;
    write_overlap(out, &runs)
}

pub const CHEATING: &str = "cheating-passive";

pub fn run_goal_study(cfg: &StudyConfig, out: &mut OutputDir) -> Result<()> {
    let target = cfg
        .target_type
        .clone()
        .ok_or_else(|| Error::Config("goal study needs target_type".into()))?;
    let dataset = cfg.dataset()?;
    let runs = run_goal_roster(cfg, &dataset, &cfg.seeds)?;
    let rosters: Vec<RosterRun> = runs.iter().map(|g| g.roster.clone()).collect();
    write_roster_logs(out, &rosters, "")?;
    for g in &runs {
        let tag = format!("{CHEATING}-seed{}", g.roster.seed);
        out.write(&format!("curves/curve-{tag}.csv"), |w| {
            g.cheating.write_iterations_csv(w, false)
        })?;
        out.write(&format!("selected/selected-{tag}.csv"), |w| {
            g.cheating.write_selected_ids(w)
        })?;
        out.write(&format!("checkpoints/{tag}.ckpt"), |w| {
            g.cheating_model.write_checkpoint(w)
        })?;
    }
    let last = cfg.al.iterations;
    let from = 5.min(last);
    out.write("composition.csv", |w| {
        writeln!(w, "seed,strategy,iteration,target_fraction,base_rate")?;
        for g in &runs {
            let all = g
                .roster
                .logs
                .iter()
                .map(|l| (l.strategy.as_str(), l))
                .chain([(CHEATING, &g.cheating)]);
            for (name, log) in all {
                for (i, f) in composition(log, &target)?.iter().enumerate() {
                    writeln!(
                        w,
                        "{},{name},{},{f:?},{:?}",
                        g.roster.seed,
                        i + 1,
                        g.base_rate
                    )?;
                }
            }
        }
        Ok(())
    })?;
    out.write("goal_summary.csv", |w| {
        writeln!(
            w,
            "seed,strategy,final_accuracy,mean_target_fraction,base_rate"
        )?;
        for g in &runs {
            let all = g
                .roster
                .logs
                .iter()
                .map(|l| (l.strategy.as_str(), l))
                .chain([(CHEATING, &g.cheating)]);
            for (name, log) in all {
                let frac = mean_fraction(&composition(log, &target)?, from, last);
                writeln!(
                    w,
                    "{},{name},{:?},{frac:?},{:?}",
                    g.roster.seed,
                    log.final_accuracy(),
                    g.base_rate
                )?;
            }
        }
        Ok(())
    })
}

/// The checkpoint from the config, or one trained by a curiosity run on the
/// first roster seed (saved into the output directory).
fn study_model(
    cfg: &StudyConfig,
    dataset: &Dataset,
    split: &DatasetSplit,
    out: &mut OutputDir,
) -> Result<ModelParams> {
    if let Some(path) = &cfg.checkpoint {
        return ModelParams::load(path);
    }
    let (_, params) = run_experiment_with_model(
        &cfg.al_config(Strategy::Curiosity, cfg.seeds[0], None),
        split,
        dataset,
    )?;
    out.write("checkpoints/study-model.ckpt", |w| {
        params.write_checkpoint(w)
    })?;
    Ok(params)
}

pub fn run_convergence_study(cfg: &StudyConfig, out: &mut OutputDir) -> Result<ConvergenceReport> {
    let dataset = cfg.dataset()?;
    let split = make_split(&dataset, cfg.split, None, split_seed(cfg.seeds[0]))?;
    let params = study_model(cfg, &dataset, &split, out)?;
    let report = convergence_study(&params, &dataset, &split, &cfg.convergence, cfg.seeds[0])?;
    out.write("convergence.csv", |w| {
        writeln!(w, "strategy,samples,repetition,rho")?;
        for (&(st, m, rep), r) in &report.rho {
            writeln!(w, "{st},{m},{rep},{}", opt(r.map(|v| format!("{v:?}"))))?;
        }
        Ok(())
    })?;
    out.write("convergence_summary.csv", |w| {
        writeln!(w, "strategy,samples,median_rho")?;
        for st in SAMPLING_STRATEGIES {
            for &m in &report.sample_counts {
                writeln!(w, "{st},{m},{:?}", report.median_rho(st, m))?;
            }
        }
        Ok(())
    })?;
    out.write("traces.csv", |w| {
        writeln!(w, "strategy,samples,repetition,item_id,score")?;
        for (&(st, m, rep), scores) in &report.scores {
            for (id, s) in report.items.iter().zip(scores) {
                writeln!(w, "{st},{m},{rep},{id},{s:?}")?;
            }
        }
        Ok(())
    })?;
    Ok(report)
}

pub fn run_fastcheck_study(
    cfg: &StudyConfig,
    out: &mut OutputDir,
) -> Result<Vec<(usize, Option<f64>)>> {
    let dataset = cfg.dataset()?;
    let split = make_split(&dataset, cfg.split, None, split_seed(cfg.seeds[0]))?;
    let params = study_model(cfg, &dataset, &split, out)?;
    let (points, rhos) = fastcheck_study(&params, &dataset, &split, &cfg.fastcheck, cfg.seeds[0])?;
    out.write("fastcheck.csv", |w| {
        writeln!(w, "samples,item_id,fast,exact")?;
        for p in &points {
            writeln!(w, "{},{},{:?},{:?}", p.samples, p.item, p.fast, p.exact)?;
        }
        Ok(())
    })?;
    out.write("fastcheck_rho.csv", |w| {
        writeln!(w, "samples,rho")?;
        for (m, r) in &rhos {
            writeln!(w, "{m},{}", opt(r.map(|v| format!("{v:?}"))))?;
        }
        Ok(())
    })?;
    Ok(rhos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub study: StudyKind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dataset_sha256: String,
    pub config: serde_json::Value,
    pub files: Vec<String>,
}

/// Runs the configured study into `dir` and writes `manifest.json` last.
pub fn run_study(cfg: &StudyConfig, dir: &Path) -> Result<Manifest> {
    let mut out = OutputDir::create(dir)?;
    match cfg.study {
        StudyKind::Savings => run_savings_study(cfg, &mut out)?,
        StudyKind::Overlap => run_overlap_study(cfg, &mut out)?,
        StudyKind::Goal => run_goal_study(cfg, &mut out)?,
        StudyKind::Convergence => {
            run_convergence_study(cfg, &mut out)?;
        }
        StudyKind::Fastcheck => {
            run_fastcheck_study(cfg, &mut out)?;
        }
    }
    let mut bytes = Vec::new();
    cfg.dataset()?.write(&mut bytes)?;
    let mut files = out.files().to_vec();
    files.sort();
    let manifest = Manifest {
        tool: "bayesal".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        study: cfg.study,
        config_hash: cfg.hash()?,
        seeds: cfg.seeds.clone(),
        dataset_sha256: format!("{:x}", Sha256::digest(&bytes)),
        config: serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(manifest)
}
