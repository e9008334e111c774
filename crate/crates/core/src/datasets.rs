//! Synthetic two-modality classification data, the dataset file format and
//! pool/test/eval splits.
//!
//! Each item carries two frozen feature vectors (an "image" modality and a
//! "question" modality), a question-type tag and a ground-truth label. Items
//! of type `binary` only ever take labels 0 and 1, mirroring yes/no answers
//! inside a larger answer vocabulary; `open` items use all `J` labels.
//!
//! Labels are hidden behind [`Dataset::label`], which counts every read per
//! item so tests can prove that unqueried pool and test-domain labels are
//! never touched.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BINARY: &str = "binary";
pub const OPEN: &str = "open";

const FILE_MAGIC: &str = "bayesal-dataset";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dim_a: usize,
    pub dim_b: usize,
    pub classes: usize,
    pub types: Vec<String>,
}

impl DatasetMeta {
    pub fn fused_dim(&self) -> usize {
        self.dim_a + self.dim_b
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem {
    pub id: ItemId,
    pub features_a: Vec<f64>,
    pub features_b: Vec<f64>,
    /// Index into [`DatasetMeta::types`].
    pub qtype: usize,
    label: usize,
}

impl PoolItem {
    pub fn new(
        id: ItemId,
        features_a: Vec<f64>,
        features_b: Vec<f64>,
        qtype: usize,
        label: usize,
    ) -> Self {
        PoolItem {
            id,
            features_a,
            features_b,
            qtype,
            label,
        }
    }

    /// Concatenated modality vectors, the model input.
    pub fn fused(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.features_a.len() + self.features_b.len());
        v.extend_from_slice(&self.features_a);
        v.extend_from_slice(&self.features_b);
        v
    }
}

#[derive(Debug)]
pub struct Dataset {
    meta: DatasetMeta,
    items: Vec<PoolItem>,
    index: HashMap<ItemId, usize>,
    label_reads: Vec<AtomicU32>,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            meta: self.meta.clone(),
            items: self.items.clone(),
            index: self.index.clone(),
            label_reads: self.items.iter().map(|_| AtomicU32::new(0)).collect(),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta && self.items == other.items
    }
}

impl Dataset {
    /// Validates dimensions, labels, type tags and id uniqueness.
    pub fn new(meta: DatasetMeta, items: Vec<PoolItem>) -> Result<Self> {
        if meta.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if meta.types.is_empty() {
            return Err(Error::invalid("type set is empty"));
        }
        let mut index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            validate_item(&meta, item)
                .map_err(|msg| Error::invalid(format!("item {}: {msg}", item.id)))?;
            if index.insert(item.id, pos).is_some() {
                return Err(Error::invalid(format!("duplicate item id {}", item.id)));
            }
        }
        let label_reads = items.iter().map(|_| AtomicU32::new(0)).collect();
        Ok(Dataset {
            meta,
            items,
            index,
            label_reads,
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: ItemId) -> Option<&PoolItem> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn type_name(&self, id: ItemId) -> Option<&str> {
        self.item(id).map(|it| self.meta.types[it.qtype].as_str())
    }

    /// Ground-truth label of `id`; every call is recorded in the audit.
    pub fn label(&self, id: ItemId) -> Option<usize> {
        let pos = *self.index.get(&id)?;
        self.label_reads[pos].fetch_add(1, Ordering::Relaxed);
        Some(self.items[pos].label)
    }

    /// How many times the label of `id` has been read.
    pub fn label_reads(&self, id: ItemId) -> u32 {
        self.index
            .get(&id)
            .map_or(0, |&i| self.label_reads[i].load(Ordering::Relaxed))
    }

    pub fn reset_label_audit(&self) {
        for c in &self.label_reads {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FILE_MAGIC} {FILE_VERSION}")?;
        writeln!(w, "dims\t{}\t{}", self.meta.dim_a, self.meta.dim_b)?;
        writeln!(w, "classes\t{}", self.meta.classes)?;
        writeln!(w, "types\t{}", self.meta.types.join("\t"))?;
        for item in &self.items {
            write!(
                w,
                "{}\t{}\t{}",
                item.id,
                self.meta.types[item.qtype],
                item.label + 1
            )?;
            for v in item.features_a.iter().chain(&item.features_b) {
                write!(w, "\t{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, l)) => Ok((n, l?)),
                None => Err(perr(0, format!("empty or truncated file: missing {what}"))),
            }
        };

        let (n, magic) = header("header")?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(FILE_MAGIC)
            || parts.next().and_then(|v| v.parse().ok()) != Some(FILE_VERSION)
        {
            return Err(perr(n, format!("expected `{FILE_MAGIC} {FILE_VERSION}`")));
        }
        let (n, dims) = header("dims")?;
        let dims: Vec<&str> = dims.split('\t').collect();
        let (dim_a, dim_b) = match dims.as_slice() {
            ["dims", a, b] => (
                a.parse::<usize>().map_err(|e| perr(n, e.to_string()))?,
                b.parse::<usize>().map_err(|e| perr(n, e.to_string()))?,
            ),
            _ => return Err(perr(n, "expected `dims<TAB>A<TAB>B`".into())),
        };
        let (n, classes) = header("classes")?;
        let classes = classes
            .strip_prefix("classes\t")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| perr(n, "expected `classes<TAB>J`".into()))?;
        let (n, types) = header("types")?;
        let types: Vec<String> = match types.strip_prefix("types\t") {
            Some(rest) => rest.split('\t').map(str::to_owned).collect(),
            None => return Err(perr(n, "expected `types<TAB>...`".into())),
        };
        let meta = DatasetMeta {
            dim_a,
            dim_b,
            classes,
            types,
        };

        let mut items = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let expected = 3 + dim_a + dim_b;
            if fields.len() != expected {
                return Err(perr(
                    n,
                    format!("row has {} fields, expected {expected}", fields.len()),
                ));
            }
            let id = ItemId(
                fields[0]
                    .parse()
                    .map_err(|e| perr(n, format!("bad id: {e}")))?,
            );
            let qtype = meta
                .type_index(fields[1])
                .ok_or_else(|| perr(n, format!("undeclared type {:?}", fields[1])))?;
            let label: usize = fields[2]
                .parse()
                .map_err(|e| perr(n, format!("bad label: {e}")))?;
            if label == 0 || label > classes {
                return Err(perr(n, format!("label {label} outside 1..={classes}")));
            }
            let floats = fields[3..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| perr(n, format!("bad float {f:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if !seen.insert(id) {
                return Err(perr(n, format!("duplicate id {id}")));
            }
            let item = PoolItem::new(
                id,
                floats[..dim_a].to_vec(),
                floats[dim_a..].to_vec(),
                qtype,
                label - 1,
            );
            validate_item(&meta, &item).map_err(|msg| perr(n, msg))?;
            items.push(item);
        }
        if items.is_empty() {
            return Err(perr(4, "dataset has no items".into()));
        }
        Dataset::new(meta, items)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Dataset::read(std::io::BufReader::new(file), path)
    }
}

fn validate_item(meta: &DatasetMeta, item: &PoolItem) -> std::result::Result<(), String> {
    if item.features_a.len() != meta.dim_a || item.features_b.len() != meta.dim_b {
        return Err(format!(
            "feature dims ({}, {}) differ from declared ({}, {})",
            item.features_a.len(),
            item.features_b.len(),
            meta.dim_a,
            meta.dim_b
        ));
    }
    if item.label >= meta.classes {
        return Err(format!(
            "label {} outside 1..={}",
            item.label + 1,
            meta.classes
        ));
    }
    if item.qtype >= meta.types.len() {
        return Err(format!("type index {} undeclared", item.qtype));
    }
    if meta.types[item.qtype] == BINARY && item.label > 1 {
        return Err(format!("binary item has label {}", item.label + 1));
    }
    if !item
        .features_a
        .iter()
        .chain(&item.features_b)
        .all(|v| v.is_finite())
    {
        return Err("non-finite feature".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeMix {
    pub binary: f64,
    pub open: f64,
}

/// Parameters of the synthetic generator.
///
/// Every class is a mixture of `modes_per_class` Gaussian clusters in the
/// image modality; mode `k` is picked with weight proportional to
/// `mode_decay^k`, so later modes are rare. Image features of an `open` item
/// with label `c` are drawn around a mode centroid `μ_{c,k}`; `binary` items
/// use `transfer · μ_{y,k} + (1 - transfer) · ν_{y,k}` with binary-only
/// centroids `ν`, so `transfer` sets how much open data helps the binary
/// task. A `hard_fraction` of items get the wider `hard_spread`. Question
/// features are a per-type embedding plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub items: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub classes: usize,
    pub type_mix: TypeMix,
    pub separation: f64,
    pub spread: f64,
    #[serde(default = "one")]
    pub modes_per_class: usize,
    #[serde(default = "one_f")]
    pub mode_decay: f64,
    /// Relabel each item with the class of its nearest mode centroid, so
    /// labels are a deterministic function of the image features.
    #[serde(default)]
    pub nearest_mode_labels: bool,
    #[serde(default)]
    pub hard_fraction: f64,
    #[serde(default)]
    pub hard_spread: f64,
    /// Separation of the binary-only centroids `ν_0, ν_1`.
    pub binary_separation: f64,
    #[serde(default)]
    pub transfer: f64,
    pub question_noise: f64,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

/// Draws a synthetic dataset; fully determined by `cfg`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Dataset> {
    let mix = cfg.type_mix;
    if mix.binary < 0.0 || mix.open < 0.0 || (mix.binary + mix.open - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "type mix proportions must be nonnegative and sum to 1, got {} + {}",
            mix.binary, mix.open
        )));
    }
    if cfg.items == 0 || cfg.dim_a == 0 || cfg.dim_b == 0 {
        return Err(Error::invalid(
            "item count and dimensions must be at least 1",
        ));
    }
    if cfg.classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if cfg.modes_per_class == 0 || !(cfg.mode_decay > 0.0) {
        return Err(Error::invalid(
            "modes_per_class must be >= 1 and mode_decay > 0",
        ));
    }
    for (name, p) in [
        ("hard_fraction", cfg.hard_fraction),
        ("label_noise", cfg.label_noise),
        ("transfer", cfg.transfer),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "{name} must lie in [0, 1], got {p}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |rng: &mut ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let modes = cfg.modes_per_class;
    // Indexed [class][mode].
    let centroids: Vec<Vec<Vec<f64>>> = (0..cfg.classes)
        .map(|_| {
            (0..modes)
                .map(|_| gauss(&mut rng, cfg.dim_a, cfg.separation))
                .collect()
        })
        .collect();
    let binary_centroids: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|y| {
            (0..modes)
                .map(|k| {
                    let own = gauss(&mut rng, cfg.dim_a, cfg.binary_separation);
                    centroids[y][k]
                        .iter()
                        .zip(own)
                        .map(|(m, n)| cfg.transfer * m + (1.0 - cfg.transfer) * n)
                        .collect()
                })
                .collect()
        })
        .collect();
    let mode_weights: Vec<f64> = (0..modes).map(|k| cfg.mode_decay.powi(k as i32)).collect();
    let mode_total: f64 = mode_weights.iter().sum();
    let embeddings: Vec<Vec<f64>> = (0..2).map(|_| gauss(&mut rng, cfg.dim_b, 1.0)).collect();

    // Exact type counts, then shuffled.
    let n_binary = (cfg.items as f64 * mix.binary).round() as usize;
    let mut kinds: Vec<usize> = (0..cfg.items).map(|i| usize::from(i >= n_binary)).collect();
    kinds.shuffle(&mut rng);

    let meta = DatasetMeta {
        dim_a: cfg.dim_a,
        dim_b: cfg.dim_b,
        classes: cfg.classes,
        types: vec![BINARY.to_owned(), OPEN.to_owned()],
    };
    let mut items = Vec::with_capacity(cfg.items);
    for (i, &kind) in kinds.iter().enumerate() {
        let allowed = if kind == 0 { 2 } else { cfg.classes };
        let clean = rng.gen_range(0..allowed);
        let mut u = rng.gen::<f64>() * mode_total;
        let mut mode = 0;
        while mode + 1 < modes && u >= mode_weights[mode] {
            u -= mode_weights[mode];
            mode += 1;
        }
        let centre = if kind == 0 {
            &binary_centroids[clean][mode]
        } else {
            &centroids[clean][mode]
        };
        let spread = if rng.gen::<f64>() < cfg.hard_fraction {
            cfg.hard_spread
        } else {
            cfg.spread
        };
        let features_a: Vec<f64> = centre
            .iter()
            .zip(gauss(&mut rng, cfg.dim_a, spread))
            .map(|(c, e)| c + e)
            .collect();
        let features_b: Vec<f64> = embeddings[kind]
            .iter()
            .zip(gauss(&mut rng, cfg.dim_b, cfg.question_noise))
            .map(|(c, e)| c + e)
            .collect();
        let clean = if cfg.nearest_mode_labels {
            let table = if kind == 0 {
                &binary_centroids[..]
            } else {
                &centroids[..]
            };
            nearest_class(table, &features_a)
        } else {
            clean
        };
        let label = if rng.gen::<f64>() < cfg.label_noise {
            rng.gen_range(0..allowed)
        } else {
            clean
        };
        items.push(PoolItem::new(
            ItemId(i as u32),
            features_a,
            features_b,
            kind,
            label,
        ));
    }
    Dataset::new(meta, items)
}

fn nearest_class(table: &[Vec<Vec<f64>>], x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (class, modes) in table.iter().enumerate() {
        for centre in modes {
            let d: f64 = centre.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
            if d < best.0 {
                best = (d, class);
            }
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub initial_train: usize,
    pub test_domain: usize,
    pub eval: usize,
}

/// Disjoint id sets; every list is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub initial_train: Vec<ItemId>,
    pub pool: Vec<ItemId>,
    pub test_domain: Vec<ItemId>,
    pub eval: Vec<ItemId>,
    pub target_type: Option<String>,
}

impl DatasetSplit {
    /// Checks pairwise disjointness of the four id sets.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, ids) in self.parts() {
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::invalid(format!(
                        "id {id} appears twice (second time in {name})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn parts(&self) -> [(&'static str, &Vec<ItemId>); 4] {
        [
            ("initial_train", &self.initial_train),
            ("pool", &self.pool),
            ("test_domain", &self.test_domain),
            ("eval", &self.eval),
        ]
    }

    /// Hex SHA-256 over the four id lists, used to check that runs share a split.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, ids) in self.parts() {
            h.update(name.as_bytes());
            for id in ids {
                h.update(id.0.to_le_bytes());
            }
        }
        if let Some(t) = &self.target_type {
            h.update(t.as_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// Seeded split. With `target_type`, the test-domain and evaluation sets are
/// drawn only from that type while train and pool stay unfiltered.
pub fn make_split(
    dataset: &Dataset,
    sizes: SplitSizes,
    target_type: Option<&str>,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut ids: Vec<ItemId> = dataset.items().iter().map(|i| i.id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let targeted: Vec<ItemId> = match target_type {
        Some(name) => {
            let ti = dataset
                .meta()
                .type_index(name)
                .ok_or_else(|| Error::invalid(format!("unknown question type {name:?}")))?;
            ids.iter()
                .copied()
                .filter(|&id| dataset.item(id).map(|it| it.qtype) == Some(ti))
                .collect()
        }
        None => ids.clone(),
    };
    let held_out = sizes.test_domain + sizes.eval;
    if held_out > targeted.len() {
        return Err(Error::invalid(format!(
            "need {held_out} test-domain + eval items but only {} are eligible",
            targeted.len()
        )));
    }
    let mut test_domain = targeted[..sizes.test_domain].to_vec();
    let mut eval = targeted[sizes.test_domain..held_out].to_vec();
    let held: BTreeSet<ItemId> = targeted[..held_out].iter().copied().collect();
    let remaining: Vec<ItemId> = ids
        .iter()
        .copied()
        .filter(|id| !held.contains(id))
        .collect();
    if sizes.initial_train == 0 || sizes.initial_train > remaining.len() {
        return Err(Error::invalid(format!(
            "initial training size {} infeasible with {} remaining items",
            sizes.initial_train,
            remaining.len()
        )));
    }
    let mut initial_train = remaining[..sizes.initial_train].to_vec();
    let mut pool = remaining[sizes.initial_train..].to_vec();
    if pool.is_empty() {
        log::warn!("split leaves the pool empty");
    }
    for v in [&mut initial_train, &mut pool, &mut test_domain, &mut eval] {
        v.sort_unstable();
    }
    let split = DatasetSplit {
        initial_train,
        pool,
        test_domain,
        eval,
        target_type: target_type.map(str::to_owned),
    };
    split.validate()?;
    Ok(split)
}

/// Restricts the pool to items of `target_type`; everything else is kept.
pub fn cheat_filter(
    split: &DatasetSplit,
    dataset: &Dataset,
    target_type: &str,
) -> Result<DatasetSplit> {
    let ti = dataset
        .meta()
        .type_index(target_type)
        .ok_or_else(|| Error::invalid(format!("unknown question type {target_type:?}")))?;
    let pool: Vec<ItemId> = split
        .pool
        .iter()
        .copied()
        .filter(|&id| dataset.item(id).map(|it| it.qtype) == Some(ti))
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid(format!(
            "no pool items of type {target_type:?}"
        )));
    }
    let out = DatasetSplit {
        pool,
        ..split.clone()
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            items: 400,
            dim_a: 4,
            dim_b: 3,
            classes: 5,
            type_mix: TypeMix {
                binary: 0.4,
                open: 0.6,
            },
            separation: 3.0,
            spread: 1.0,
            modes_per_class: 2,
            mode_decay: 0.5,
            nearest_mode_labels: false,
            hard_fraction: 0.2,
            hard_spread: 2.0,
            binary_separation: 2.0,
            transfer: 0.5,
            question_noise: 0.3,
            label_noise: 0.05,
            seed: 9,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&GeneratorConfig {
            seed: 10,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn binary_items_use_two_labels() {
        let d = generate_synthetic(&small_config()).unwrap();
        for item in d.items() {
            if d.meta().types[item.qtype] == BINARY {
                assert!(d.label(item.id).unwrap() <= 1);
            }
        }
    }

    #[test]
    fn type_mix_counts() {
        let cfg = GeneratorConfig {
            items: 10_000,
            ..small_config()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let binary = d.items().iter().filter(|i| i.qtype == 0).count();
        assert!((3920..=4080).contains(&binary), "{binary}");
    }

    #[test]
    fn bad_type_mix_rejected() {
        let cfg = GeneratorConfig {
            type_mix: TypeMix {
                binary: 0.5,
                open: 0.6,
            },
            ..small_config()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn nearest_centroid_separates_clean_clusters() {
        let cfg = GeneratorConfig {
            items: 2000,
            separation: 6.0,
            spread: 0.5,
            modes_per_class: 1,
            mode_decay: 1.0,
            nearest_mode_labels: false,
            hard_fraction: 0.0,
            label_noise: 0.0,
            type_mix: TypeMix {
                binary: 0.0,
                open: 1.0,
            },
            ..small_config()
        };
        let d = generate_synthetic(&cfg).unwrap();
        // Centroids estimated on the first half, scored on the second.
        let (fit, score) = d.items().split_at(1000);
        let mut sums = vec![vec![0.0; cfg.dim_a]; cfg.classes];
        let mut counts = vec![0usize; cfg.classes];
        for it in fit {
            let y = d.label(it.id).unwrap();
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(&it.features_a) {
                *s += v;
            }
        }
        let cents: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
            .collect();
        let correct = score
            .iter()
            .filter(|it| {
                let best = (0..cfg.classes)
                    .min_by(|&a, &b| {
                        let da: f64 = cents[a]
                            .iter()
                            .zip(&it.features_a)
                            .map(|(c, x)| (c - x).powi(2))
                            .sum();
                        let db: f64 = cents[b]
                            .iter()
                            .zip(&it.features_a)
                            .map(|(c, x)| (c - x).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                Some(best) == d.label(it.id)
            })
            .count();
        assert!(correct as f64 / score.len() as f64 >= 0.99, "{correct}");
    }

    #[test]
    fn file_round_trip_and_errors() {
        let d = generate_synthetic(&small_config()).unwrap();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        let back = Dataset::read(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(d, back);

        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        let mut fields: Vec<String> = lines[5].split('\t').map(str::to_owned).collect();
        fields[1] = OPEN.into();
        fields[2] = "6".into();
        lines[5] = fields.join("\t");
        match Dataset::read(lines.join("\n").as_bytes(), Path::new("mem")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("label 6"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        assert!(Dataset::read(&b""[..], Path::new("mem")).is_err());
        let header_only = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(Dataset::read(header_only.as_bytes(), Path::new("mem")).is_err());

        let mut drift: Vec<String> = text.lines().map(str::to_owned).collect();
        drift[7].push_str("\t1.0");
        match Dataset::read(drift.join("\n").as_bytes(), Path::new("mem")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let d = generate_synthetic(&small_config()).unwrap();
        let sizes = SplitSizes {
            initial_train: 50,
            test_domain: 40,
            eval: 60,
        };
        let a = make_split(&d, sizes, None, 3).unwrap();
        a.validate().unwrap();
        assert_eq!(a.pool.len(), 400 - 150);
        assert_eq!(a, make_split(&d, sizes, None, 3).unwrap());
        assert_ne!(a, make_split(&d, sizes, None, 4).unwrap());

        let f = make_split(&d, sizes, Some(BINARY), 3).unwrap();
        assert!(f
            .test_domain
            .iter()
            .chain(&f.eval)
            .all(|&id| d.type_name(id) == Some(BINARY)));
        assert!(f.pool.iter().any(|&id| d.type_name(id) == Some(OPEN)));
        assert!(f.pool.iter().any(|&id| d.type_name(id) == Some(BINARY)));
        assert!(make_split(&d, sizes, Some("nope"), 3).is_err());
    }

    #[test]
    fn exhaustive_split_leaves_empty_pool() {
        let d = generate_synthetic(&small_config()).unwrap();
        let sizes = SplitSizes {
            initial_train: 300,
            test_domain: 50,
            eval: 50,
        };
        let s = make_split(&d, sizes, None, 1).unwrap();
        assert!(s.pool.is_empty());
        let too_big = SplitSizes {
            initial_train: 301,
            ..sizes
        };
        assert!(make_split(&d, too_big, None, 1).is_err());
    }

    #[test]
    fn cheat_filter_is_idempotent() {
        let d = generate_synthetic(&small_config()).unwrap();
        let sizes = SplitSizes {
            initial_train: 50,
            test_domain: 40,
            eval: 60,
        };
        let s = make_split(&d, sizes, Some(BINARY), 5).unwrap();
        let once = cheat_filter(&s, &d, BINARY).unwrap();
        assert!(once.pool.iter().all(|&id| d.type_name(id) == Some(BINARY)));
        assert_eq!(once.test_domain, s.test_domain);
        assert_eq!(once.initial_train, s.initial_train);
        assert_eq!(cheat_filter(&once, &d, BINARY).unwrap(), once);
        once.validate().unwrap();

        let mut no_binary = s.clone();
        no_binary.pool.retain(|&id| d.type_name(id) == Some(OPEN));
        assert!(cheat_filter(&no_binary, &d, BINARY).is_err());
    }

    #[test]
    fn label_reads_are_audited() {
        let d = generate_synthetic(&small_config()).unwrap();
        let id = d.items()[3].id;
        assert_eq!(d.label_reads(id), 0);
        d.label(id);
        d.label(id);
        assert_eq!(d.label_reads(id), 2);
        d.reset_label_audit();
        assert_eq!(d.label_reads(id), 0);
    }
}
