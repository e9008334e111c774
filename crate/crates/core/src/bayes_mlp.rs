//! Multilayer perceptron with Bernoulli(0.5) weight masks.
//!
//! The variational family is `ω = θ ∘ ε` with every weight-matrix entry of
//! `ε` drawn independently from Bernoulli(0.5). Biases are never masked.
//! Hidden layers use `tanh`, the output layer a max-shifted softmax.
//!
//! Weights are stored row-major with shape `(outputs, inputs)`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ItemId;
use crate::error::{Error, Result};

/// Floor applied before taking the log of a predicted probability.
pub const LOG_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;
const CHECKPOINT_MAGIC: &str = "bayesal-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softmax,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            "softmax" => Some(Activation::Softmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `(outputs, inputs)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }
}

/// Shape of the classifier head: fused input, two hidden widths, classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub classes: usize,
}

/// Base parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    /// Validates layer compatibility, activations and finiteness.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(Error::shape(format!("layer {i} has a zero dimension")));
            }
            if layer.weights.len() != layer.inputs * layer.outputs {
                return Err(Error::shape(format!(
                    "layer {i}: {} weights for a {}x{} matrix",
                    layer.weights.len(),
                    layer.outputs,
                    layer.inputs
                )));
            }
            if layer.bias.len() != layer.outputs {
                return Err(Error::shape(format!(
                    "layer {i}: bias length {} != {}",
                    layer.bias.len(),
                    layer.outputs
                )));
            }
            if i > 0 && layers[i - 1].outputs != layer.inputs {
                return Err(Error::shape(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    layer.inputs,
                    i - 1,
                    layers[i - 1].outputs
                )));
            }
            let is_last = i + 1 == layers.len();
            let expected = if is_last {
                Activation::Softmax
            } else {
                Activation::Tanh
            };
            if layer.activation != expected {
                return Err(Error::invalid(format!(
                    "layer {i} must use {} activation",
                    expected.tag()
                )));
            }
            if !layer
                .weights
                .iter()
                .chain(&layer.bias)
                .all(|v| v.is_finite())
            {
                return Err(Error::invalid(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(ModelParams { layers })
    }

    /// All-zero parameters for the given layer sizes (input first, classes last).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("need at least input and output sizes"));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n {
                    Activation::Softmax
                } else {
                    Activation::Tanh
                };
                Layer::zeros(w[0], w[1], act)
            })
            .collect();
        ModelParams::new(layers)
    }

    /// Glorot-uniform weights scaled by sqrt(2) to offset the halved expected
    /// fan-in under Bernoulli(0.5) masks; zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let sizes = [arch.input_dim, arch.hidden[0], arch.hidden[1], arch.classes];
        let mut params = ModelParams::zeros(&sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut params.layers {
            let limit = (12.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Input size followed by each layer's output size.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Flat view `[w0, b0, w1, b1, ...]`, used for finite-difference checks.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        if flat.len() != total {
            return Err(Error::shape(format!(
                "flat length {} != {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(w, "layers {}", self.layers.len())?;
        for layer in &self.layers {
            writeln!(
                w,
                "layer {} {} {}",
                layer.inputs,
                layer.outputs,
                layer.activation.tag()
            )?;
            write!(w, "w")?;
            for v in &layer.weights {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
            write!(w, "b")?;
            for v in &layer.bias {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
        let mut it = lines.iter().enumerate().map(|(i, l)| (i + 1, l.as_str()));
        let mut next = |what: &str| {
            it.next().ok_or_else(|| {
                perr(
                    lines.len(),
                    format!("unexpected end of file, expected {what}"),
                )
            })
        };

        let (ln, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(perr(ln, "not a checkpoint file".into()));
        }
        match parts.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(CHECKPOINT_VERSION) => {}
            other => {
                return Err(perr(
                    ln,
                    format!("unsupported checkpoint version {other:?}"),
                ))
            }
        }

        let (ln, count_line) = next("layer count")?;
        let count: usize = count_line
            .strip_prefix("layers ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(ln, "expected `layers <n>`".into()))?;

        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, spec) = next("layer header")?;
            let fields: Vec<&str> = spec.split_whitespace().collect();
            let (inputs, outputs, act) = match fields.as_slice() {
                ["layer", i, o, a] => (
                    i.parse::<usize>().map_err(|e| perr(ln, e.to_string()))?,
                    o.parse::<usize>().map_err(|e| perr(ln, e.to_string()))?,
                    Activation::from_tag(a)
                        .ok_or_else(|| perr(ln, format!("unknown activation {a}")))?,
                ),
                _ => return Err(perr(ln, "expected `layer <in> <out> <activation>`".into())),
            };
            let (ln, wline) = next("weights")?;
            let weights = parse_floats(wline, "w").map_err(|m| perr(ln, m))?;
            let (ln, bline) = next("bias")?;
            let bias = parse_floats(bline, "b").map_err(|m| perr(ln, m))?;
            layers.push(Layer {
                inputs,
                outputs,
                weights,
                bias,
                activation: act,
            });
        }
        ModelParams::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        ModelParams::read_checkpoint(std::io::BufReader::new(file), path)
    }
}

fn parse_floats(line: &str, tag: &str) -> std::result::Result<Vec<f64>, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(format!("expected a `{tag}` row"));
    }
    parts
        .map(|p| {
            p.parse::<f64>()
                .map_err(|e| format!("bad float {p:?}: {e}"))
        })
        .collect()
}

/// Binary mask ε over every weight matrix (biases excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    layers: Vec<Vec<bool>>,
}

impl WeightMask {
    pub fn ones(params: &ModelParams) -> Self {
        WeightMask {
            layers: params
                .layers
                .iter()
                .map(|l| vec![true; l.weights.len()])
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        WeightMask { layers }
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        if self.layers.len() != params.layers.len() {
            return Err(Error::shape(format!(
                "mask has {} layers, model has {}",
                self.layers.len(),
                params.layers.len()
            )));
        }
        for (i, (m, l)) in self.layers.iter().zip(&params.layers).enumerate() {
            if m.len() != l.weights.len() {
                return Err(Error::shape(format!(
                    "mask layer {i} has {} entries, weights have {}",
                    m.len(),
                    l.weights.len()
                )));
            }
        }
        Ok(())
    }

    fn draw<R: RngCore>(params: &ModelParams, rng: &mut R) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let mut bits = Vec::with_capacity(l.weights.len());
                while bits.len() < l.weights.len() {
                    let word = rng.next_u64();
                    let take = (l.weights.len() - bits.len()).min(64);
                    bits.extend((0..take).map(|k| (word >> k) & 1 == 1));
                }
                bits
            })
            .collect();
        WeightMask { layers }
    }
}

/// Identifies a set of `count` mask draws generated from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DrawSet {
    pub seed: u64,
    pub count: usize,
}

/// One Monte-Carlo parameter sample ω = θ ∘ ε.
#[derive(Debug, Clone)]
pub struct MaskedParameters<'a> {
    params: &'a ModelParams,
    mask: WeightMask,
    realized: Vec<Vec<f64>>,
    draws: DrawSet,
    index: usize,
}

impl<'a> MaskedParameters<'a> {
    /// Applies `mask` to `params`; `draws`/`index` record provenance.
    pub fn realize(
        params: &'a ModelParams,
        mask: WeightMask,
        draws: DrawSet,
        index: usize,
    ) -> Result<Self> {
        mask.check(params)?;
        let realized = params
            .layers
            .iter()
            .zip(&mask.layers)
            .map(|(l, m)| {
                l.weights
                    .iter()
                    .zip(m)
                    .map(|(&w, &keep)| if keep { w } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(MaskedParameters {
            params,
            mask,
            realized,
            draws,
            index,
        })
    }

    pub fn params(&self) -> &'a ModelParams {
        self.params
    }

    pub fn mask(&self) -> &WeightMask {
        &self.mask
    }

    /// Realized weight matrices ω, one per layer.
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.realized
    }

    pub fn draws(&self) -> DrawSet {
        self.draws
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// Class distribution under this parameter sample.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.params.input_dim() {
            return Err(Error::shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.params.input_dim()
            )));
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (layer, w) in self.params.layers.iter().zip(&self.realized) {
            let mut z = affine(w, &layer.bias, layer.inputs, &h);
            match layer.activation {
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Softmax => softmax_in_place(&mut z),
            }
            h = z;
        }
        h
    }
}

fn affine(weights: &[f64], bias: &[f64], inputs: usize, x: &[f64]) -> Vec<f64> {
    weights
        .chunks_exact(inputs)
        .zip(bias)
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Class distribution for `x` under `ω = θ ∘ mask`.
pub fn forward(params: &ModelParams, mask: &WeightMask, x: &[f64]) -> Result<Vec<f64>> {
    let draws = DrawSet { seed: 0, count: 1 };
    MaskedParameters::realize(params, mask.clone(), draws, 0)?.forward(x)
}

/// Draws `count` i.i.d. Bernoulli(0.5) weight masks from `seed`.
///
/// Draws are generated sequentially from one stream, so the first `k` masks
/// for a seed do not depend on `count`.
pub fn sample_masks(
    params: &ModelParams,
    count: usize,
    seed: u64,
) -> Result<Vec<MaskedParameters<'_>>> {
    if count == 0 {
        return Err(Error::invalid("mask count must be at least 1"));
    }
    let draws = DrawSet { seed, count };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| MaskedParameters::realize(params, WeightMask::draw(params, &mut rng), draws, i))
        .collect()
}

/// Per-item `M × J` matrix of sampled class distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMatrix {
    item: ItemId,
    samples: usize,
    classes: usize,
    probs: Vec<f64>,
    draws: DrawSet,
}

impl PredictiveMatrix {
    /// Builds a matrix from row-major probabilities, checking row-stochasticity.
    pub fn new(
        item: ItemId,
        samples: usize,
        classes: usize,
        probs: Vec<f64>,
        draws: DrawSet,
    ) -> Result<Self> {
        if samples == 0 || classes == 0 {
            return Err(Error::invalid("predictive matrix needs M >= 1 and J >= 1"));
        }
        if probs.len() != samples * classes {
            return Err(Error::shape(format!(
                "{} probabilities for a {samples}x{classes} matrix",
                probs.len()
            )));
        }
        for (m, row) in probs.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!(
                    "row {m} has entries outside [0, 1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {m} sums to {s}")));
            }
        }
        Ok(PredictiveMatrix {
            item,
            samples,
            classes,
            probs,
            draws,
        })
    }

    /// Convenience constructor from explicit rows.
    pub fn from_rows(item: ItemId, rows: &[Vec<f64>], draws: DrawSet) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::shape("ragged predictive rows"));
        }
        let probs = rows.iter().flatten().copied().collect();
        PredictiveMatrix::new(item, rows.len(), classes, probs, draws)
    }

    pub fn item(&self) -> ItemId {
        self.item
    }

    /// M.
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// J.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn draws(&self) -> DrawSet {
        self.draws
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.probs[m * self.classes..(m + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

impl fmt::Display for PredictiveMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "item {} ({}x{})", self.item, self.samples, self.classes)?;
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.4}")).collect();
            writeln!(f, "  [{}]", cells.join(", "))?;
        }
        Ok(())
    }
}

/// Stacks `forward` over every mask for one item.
pub fn predictive_matrix(
    masks: &[MaskedParameters<'_>],
    item: ItemId,
    x: &[f64],
) -> Result<PredictiveMatrix> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("no masks supplied"))?;
    let draws = first.draws;
    if masks.iter().any(|m| m.draws != draws) {
        return Err(Error::invalid("masks come from different draw sets"));
    }
    let classes = first.params.classes();
    let mut probs = Vec::with_capacity(masks.len() * classes);
    for mask in masks {
        probs.extend(mask.forward(x)?);
    }
    PredictiveMatrix::new(item, masks.len(), classes, probs, draws)
}

/// `predictive_matrix` over many items, fanned out across threads.
pub fn predictive_matrices(
    masks: &[MaskedParameters<'_>],
    items: &[(ItemId, &[f64])],
) -> Result<Vec<PredictiveMatrix>> {
    items
        .par_iter()
        .map(|&(id, x)| predictive_matrix(masks, id, x))
        .collect()
}

/// Column mean of the sampled rows: the Monte-Carlo posterior predictive.
pub fn posterior_mean(pm: &PredictiveMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; pm.classes];
    for row in pm.rows() {
        for (acc, p) in mean.iter_mut().zip(row) {
            *acc += p;
        }
    }
    let inv = 1.0 / pm.samples as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

/// Labeled training examples over fused feature vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl TrainingSet {
    pub fn new(dim: usize) -> Self {
        TrainingSet {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "example has {} features, expected {}",
                x.len(),
                self.dim
            )));
        }
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Coefficient of an L2 stand-in for the prior KL term; 0 disables it.
    #[serde(default)]
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

/// Mean cross-entropy of `batch` under ω = θ ∘ mask plus `l2 · Σ θ²`
/// over weights.
pub fn batch_loss(
    params: &ModelParams,
    mask: &WeightMask,
    data: &TrainingSet,
    batch: &[usize],
    l2: f64,
) -> Result<f64> {
    loss_and_gradient(params, mask, data, batch, l2).map(|(loss, _)| loss)
}

/// Loss as in [`batch_loss`] and its gradient with respect to θ.
///
/// Since ω = θ ∘ ε, `∂L/∂θ = ∂L/∂ω ∘ ε`; masked-out weights receive only
/// the L2 contribution.
pub fn loss_and_gradient(
    params: &ModelParams,
    mask: &WeightMask,
    data: &TrainingSet,
    batch: &[usize],
    l2: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if data.dim != params.input_dim() {
        return Err(Error::shape(format!(
            "training inputs have {} features, model expects {}",
            data.dim,
            params.input_dim()
        )));
    }
    let classes = params.classes();
    let sample = MaskedParameters::realize(params, mask.clone(), DrawSet { seed: 0, count: 1 }, 0)?;
    let layers = &params.layers;
    let mut grads = Gradients {
        weights: layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
        bias: layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
    };
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);

    for &i in batch {
        let label = data.labels[i];
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        acts.clear();
        acts.push(data.input(i).to_vec());
        for (layer, w) in layers.iter().zip(&sample.realized) {
            let mut z = affine(
                w,
                &layer.bias,
                layer.inputs,
                acts.last().expect("input pushed"),
            );
            match layer.activation {
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Softmax => softmax_in_place(&mut z),
            }
            acts.push(z);
        }
        let probs = acts.last().expect("output layer");
        // NaN must survive the floor so divergence is detected.
        let p_label = probs[label];
        loss -= if p_label.is_nan() {
            p_label
        } else {
            p_label.max(LOG_FLOOR).ln()
        } * scale;

        // Softmax + cross-entropy; zero where the log floor is active.
        let mut delta: Vec<f64> = if probs[label] > LOG_FLOOR {
            probs
                .iter()
                .enumerate()
                .map(|(c, &p)| (p - f64::from(u8::from(c == label))) * scale)
                .collect()
        } else {
            vec![0.0; classes]
        };

        for li in (0..layers.len()).rev() {
            let layer = &layers[li];
            let input = &acts[li];
            let gw = &mut grads.weights[li];
            for (o, d) in delta.iter().enumerate() {
                grads.bias[li][o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if li > 0 {
                let w = &sample.realized[li];
                let mut back = vec![0.0; layer.inputs];
                for (o, d) in delta.iter().enumerate() {
                    let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, wv) in back.iter_mut().zip(row) {
                        *b += d * wv;
                    }
                }
                // tanh'(z) = 1 - h²
                for (b, h) in back.iter_mut().zip(input) {
                    *b *= 1.0 - h * h;
                }
                delta = back;
            }
        }
    }

    for ((gw, m), layer) in grads.weights.iter_mut().zip(&mask.layers).zip(layers) {
        for ((g, &keep), &theta) in gw.iter_mut().zip(m).zip(&layer.weights) {
            if !keep {
                *g = 0.0;
            }
            *g += 2.0 * l2 * theta;
        }
    }
    if l2 != 0.0 {
        loss += l2
            * layers
                .iter()
                .flat_map(|l| &l.weights)
                .map(|w| w * w)
                .sum::<f64>();
    }
    Ok((loss, grads))
}

/// Plain minibatch SGD on the single-sample Monte-Carlo ELBO: one fresh mask
/// per minibatch, prior term replaced by the optional L2 penalty.
pub fn train_epochs(
    params: &ModelParams,
    data: &TrainingSet,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !(opts.learning_rate > 0.0 && opts.learning_rate.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {}",
            opts.learning_rate
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(opts.batch_size).enumerate() {
            let mask = WeightMask::draw(&params, &mut rng);
            let (loss, grads) = loss_and_gradient(&params, &mask, data, batch, opts.l2)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b} (lr {}, batch size {}, {} examples)",
                    opts.learning_rate,
                    opts.batch_size,
                    data.len()
                )));
            }
            for ((layer, gw), gb) in params
                .layers
                .iter_mut()
                .zip(&grads.weights)
                .zip(&grads.bias)
            {
                for (w, g) in layer.weights.iter_mut().zip(gw) {
                    *w -= opts.learning_rate * g;
                }
                for (w, g) in layer.bias.iter_mut().zip(gb) {
                    *w -= opts.learning_rate * g;
                }
            }
            if let Some(bad) = params
                .layers
                .iter()
                .flat_map(|l| l.weights.iter().chain(&l.bias))
                .find(|v| !v.is_finite())
            {
                return Err(Error::Diverged(format!(
                    "parameter became non-finite ({bad}) at epoch {epoch}, batch {b} (lr {})",
                    opts.learning_rate
                )));
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }

    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_net() -> ModelParams {
        ModelParams::new(vec![
            Layer {
                inputs: 2,
                outputs: 4,
                weights: vec![0.5, -0.3, 0.1, 0.8, -0.6, 0.2, 0.4, 0.4],
                bias: vec![0.1, -0.2, 0.0, 0.05],
                activation: Activation::Tanh,
            },
            Layer {
                inputs: 4,
                outputs: 3,
                weights: vec![
                    0.3, -0.5, 0.2, 0.7, -0.4, 0.6, 0.1, -0.2, 0.25, 0.05, -0.3, 0.4,
                ],
                bias: vec![0.0, 0.1, -0.1],
                activation: Activation::Softmax,
            },
        ])
        .unwrap()
    }

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    // Same masks as tests/fixtures/oracle_values.py.
    fn hand_masks() -> Vec<WeightMask> {
        vec![
            WeightMask::from_layers(vec![
                bits(&[1, 0, 1, 1, 0, 1, 1, 1]),
                bits(&[1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 1]),
            ]),
            WeightMask::from_layers(vec![
                bits(&[1, 1, 0, 1, 1, 1, 1, 0]),
                bits(&[0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0]),
            ]),
            WeightMask::from_layers(vec![
                bits(&[0, 1, 1, 0, 1, 1, 0, 1]),
                bits(&[1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1]),
            ]),
        ]
    }

    const X: [f64; 2] = [0.7, -1.2];

    const HAND_ROWS: [[f64; 3]; 3] = [
        [0.4716706190019076, 0.21349047028187643, 0.314838910716216],
        [0.4959218148481497, 0.14322864837870178, 0.3608495367731484],
        [0.36142358146901193, 0.3142939615543363, 0.32428245697665176],
    ];

    #[test]
    fn zero_weights_give_uniform() {
        let params = ModelParams::zeros(&[2, 4, 3]).unwrap();
        let mask = hand_masks().remove(0);
        let p = forward(&params, &mask, &X).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ones_mask_matches_unmasked_pass() {
        let params = hand_net();
        let p = forward(&params, &WeightMask::ones(&params), &X).unwrap();
        // Unmasked pass computed inline.
        let l = params.layers();
        let h: Vec<f64> = (0..4)
            .map(|o| {
                (l[0].bias[o] + l[0].weights[2 * o] * X[0] + l[0].weights[2 * o + 1] * X[1]).tanh()
            })
            .collect();
        let mut z: Vec<f64> = (0..3)
            .map(|o| l[1].bias[o] + (0..4).map(|i| l[1].weights[4 * o + i] * h[i]).sum::<f64>())
            .collect();
        softmax_in_place(&mut z);
        assert_eq!(p, z);
    }

    #[test]
    fn hand_network_matches_calculator() {
        let params = hand_net();
        let p = forward(&params, &hand_masks()[0], &X).unwrap();
        for (a, b) in p.iter().zip(HAND_ROWS[0]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_predictive_matrix() {
        let params = hand_net();
        let draws = DrawSet { seed: 0, count: 3 };
        let masks: Vec<_> = hand_masks()
            .into_iter()
            .enumerate()
            .map(|(i, m)| MaskedParameters::realize(&params, m, draws, i).unwrap())
            .collect();
        let pm = predictive_matrix(&masks, ItemId(0), &X).unwrap();
        assert_eq!((pm.samples(), pm.classes()), (3, 3));
        for (row, expect) in pm.rows().zip(HAND_ROWS) {
            for (a, b) in row.iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let single = predictive_matrix(&masks[..1], ItemId(0), &X).unwrap();
        assert_eq!(single.samples(), 1);
        assert_eq!(
            single.row(0),
            forward(&params, &hand_masks()[0], &X).unwrap().as_slice()
        );
    }

    #[test]
    fn ones_masks_give_identical_rows() {
        let params = hand_net();
        let draws = DrawSet { seed: 0, count: 4 };
        let masks: Vec<_> = (0..4)
            .map(|i| {
                MaskedParameters::realize(&params, WeightMask::ones(&params), draws, i).unwrap()
            })
            .collect();
        let pm = predictive_matrix(&masks, ItemId(1), &X).unwrap();
        assert!(pm.rows().all(|r| r == pm.row(0)));
    }

    #[test]
    fn shape_errors() {
        let params = hand_net();
        let mask = WeightMask::ones(&params);
        assert!(matches!(
            forward(&params, &mask, &[1.0]),
            Err(Error::Shape(_))
        ));
        let bad = WeightMask::from_layers(vec![vec![true; 8]]);
        assert!(matches!(forward(&params, &bad, &X), Err(Error::Shape(_))));
        assert!(ModelParams::zeros(&[2, 4, 3]).is_ok());
        let mut layers = hand_net().layers().to_vec();
        layers[1].inputs = 5;
        assert!(ModelParams::new(layers).is_err());
    }

    #[test]
    fn masks_are_reproducible() {
        let params = hand_net();
        let a = sample_masks(&params, 3, 7).unwrap();
        let b = sample_masks(&params, 3, 7).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mask(), y.mask());
        }
        assert_eq!(sample_masks(&params, 1, 7).unwrap().len(), 1);
        assert!(sample_masks(&params, 0, 7).is_err());
        let c = sample_masks(&params, 3, 8).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.mask() != y.mask()));
    }

    #[test]
    fn mask_entries_are_fair_coins() {
        // 10k draws: std of the mean is 0.005, so [0.45, 0.55] is a 10-sigma band.
        let params = hand_net();
        let masks = sample_masks(&params, 10_000, 11).unwrap();
        let n = params.weight_count();
        let mut counts = vec![0usize; n];
        for m in &masks {
            for (c, &b) in counts.iter_mut().zip(m.mask().layers().iter().flatten()) {
                *c += usize::from(b);
            }
        }
        for c in counts {
            let mean = c as f64 / 10_000.0;
            assert!((0.45..=0.55).contains(&mean), "{mean}");
        }
    }

    #[test]
    fn biases_are_never_masked() {
        let params = hand_net();
        let m = &sample_masks(&params, 1, 3).unwrap()[0];
        let zero_w = WeightMask::from_layers(
            params
                .layers()
                .iter()
                .map(|l| vec![false; l.weights.len()])
                .collect(),
        );
        let masked = MaskedParameters::realize(&params, zero_w, m.draws(), 0).unwrap();
        // With every weight masked the output is softmax(b_out).
        let mut expect = params.layers()[1].bias.clone();
        softmax_in_place(&mut expect);
        assert_eq!(masked.forward(&X).unwrap(), expect);
    }

    #[test]
    fn posterior_mean_examples() {
        let d = DrawSet { seed: 0, count: 2 };
        let pm =
            PredictiveMatrix::from_rows(ItemId(0), &[vec![1.0, 0.0], vec![0.0, 1.0]], d).unwrap();
        assert_eq!(posterior_mean(&pm), vec![0.5, 0.5]);
        let one = PredictiveMatrix::from_rows(
            ItemId(0),
            &[vec![0.3, 0.7]],
            DrawSet { seed: 0, count: 1 },
        )
        .unwrap();
        assert_eq!(posterior_mean(&one), vec![0.3, 0.7]);
        let d3 = DrawSet { seed: 0, count: 3 };
        let pm3 = PredictiveMatrix::from_rows(
            ItemId(0),
            &[vec![0.8, 0.2], vec![0.6, 0.4], vec![0.1, 0.9]],
            d3,
        )
        .unwrap();
        let mean = posterior_mean(&pm3);
        assert!((mean[0] - 0.5).abs() < 1e-12 && (mean[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predictive_matrix_rejects_non_stochastic_rows() {
        let d = DrawSet { seed: 0, count: 1 };
        assert!(PredictiveMatrix::from_rows(ItemId(0), &[vec![0.5, 0.6]], d).is_err());
        assert!(PredictiveMatrix::from_rows(ItemId(0), &[vec![1.5, -0.5]], d).is_err());
        assert!(PredictiveMatrix::from_rows(ItemId(0), &[], d).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let params = hand_net();
        let mut data = TrainingSet::new(2);
        data.push(&X, 1).unwrap();
        let opts = TrainOptions {
            epochs: 0,
            learning_rate: 0.1,
            batch_size: 4,
            l2: 0.0,
        };
        let out = train_epochs(&params, &data, &opts, 1).unwrap();
        assert_eq!(out.params, params);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let params = hand_net();
        let opts = TrainOptions {
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 4,
            l2: 0.0,
        };
        assert!(train_epochs(&params, &TrainingSet::new(2), &opts, 1).is_err());
        let mut data = TrainingSet::new(2);
        data.push(&X, 0).unwrap();
        let bad_lr = TrainOptions {
            learning_rate: 0.0,
            ..opts
        };
        assert!(train_epochs(&params, &data, &bad_lr, 1).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let params = hand_net();
        let mut data = TrainingSet::new(2);
        data.push(&[1e3, -1e3], 0).unwrap();
        data.push(&[-1e3, 1e3], 2).unwrap();
        let opts = TrainOptions {
            epochs: 50,
            learning_rate: 1e308,
            batch_size: 1,
            l2: 0.0,
        };
        match train_epochs(&params, &data, &opts, 1) {
            Err(Error::Diverged(msg)) => {
                assert!(msg.contains("non-finite") && msg.contains("epoch"), "{msg}")
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let arch = Architecture {
            input_dim: 5,
            hidden: [4, 3],
            classes: 2,
        };
        let params = ModelParams::init(&arch, 42).unwrap();
        let mut buf = Vec::new();
        params.write_checkpoint(&mut buf).unwrap();
        let back = ModelParams::read_checkpoint(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(
            params
                .to_flat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            back.to_flat()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        assert_eq!(back.layer_sizes(), vec![5, 4, 3, 2]);

        let truncated = &buf[..buf.len() / 2];
        assert!(ModelParams::read_checkpoint(truncated, Path::new("mem")).is_err());
        assert!(ModelParams::read_checkpoint(&b"garbage 1\n"[..], Path::new("mem")).is_err());
    }
}
