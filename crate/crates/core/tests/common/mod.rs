#![allow(dead_code)]

use bayesal::bayes_mlp::{DrawSet, PredictiveMatrix};
use bayesal::datasets::ItemId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DRAWS: DrawSet = DrawSet { seed: 7, count: 0 };

/// Normalizes each row of `raw` (row-major, `classes` wide) into a
/// predictive matrix.
pub fn matrix(item: u32, classes: usize, raw: &[f64]) -> PredictiveMatrix {
    let rows: Vec<Vec<f64>> = raw
        .chunks(classes)
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    let draws = DrawSet {
        count: rows.len(),
        ..DRAWS
    };
    PredictiveMatrix::from_rows(ItemId(item), &rows, draws).unwrap()
}

pub fn random_matrix(
    rng: &mut ChaCha8Rng,
    item: u32,
    samples: usize,
    classes: usize,
) -> PredictiveMatrix {
    let raw: Vec<f64> = (0..samples * classes)
        .map(|_| rng.gen_range(0.001..1.0))
        .collect();
    matrix(item, classes, &raw)
}

/// A pool matrix and `tests` test matrices sharing one draw set.
pub fn random_instance(
    seed: u64,
    samples: usize,
    classes: usize,
    tests: usize,
) -> (PredictiveMatrix, Vec<PredictiveMatrix>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = random_matrix(&mut rng, 0, samples, classes);
    let t = (0..tests)
        .map(|i| random_matrix(&mut rng, 1 + i as u32, samples, classes))
        .collect();
    (pool, t)
}

use bayesal::bayes_mlp::{loss_and_gradient, Architecture, ModelParams, TrainingSet, WeightMask};
use rand_distr::{Bernoulli, StandardNormal};

/// Largest relative error between the analytic gradient and central finite
/// differences for a random model, mask and batch. Relative errors use
/// `max(|a|, |n|, 1e-6)` as denominator so near-zero entries compare in
/// absolute terms.
pub fn gradient_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        input_dim: rng.gen_range(2..6),
        hidden: [rng.gen_range(2..7), rng.gen_range(2..7)],
        classes: rng.gen_range(2..5),
    };
    let mut params = ModelParams::init(&arch, seed).unwrap();
    let keep = Bernoulli::new(0.5).unwrap();
    let mask = WeightMask::from_layers(
        params
            .layers()
            .iter()
            .map(|l| (0..l.weights.len()).map(|_| rng.sample(keep)).collect())
            .collect(),
    );
    let mut data = TrainingSet::new(arch.input_dim);
    for _ in 0..8 {
        let x: Vec<f64> = (0..arch.input_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        data.push(&x, rng.gen_range(0..arch.classes)).unwrap();
    }
    let batch: Vec<usize> = (0..8).collect();
    let l2 = if seed % 2 == 0 { 0.0 } else { 1e-3 };
    let (_, grad) = loss_and_gradient(&params, &mask, &data, &batch, l2).unwrap();
    let analytic = grad.to_flat();
    let theta = params.to_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..theta.len() {
        let mut probe = theta.clone();
        probe[k] = theta[k] + h;
        params.set_flat(&probe).unwrap();
        let up = loss_and_gradient(&params, &mask, &data, &batch, l2)
            .unwrap()
            .0;
        probe[k] = theta[k] - h;
        params.set_flat(&probe).unwrap();
        let down = loss_and_gradient(&params, &mask, &data, &batch, l2)
            .unwrap()
            .0;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    params.set_flat(&theta).unwrap();
    worst
}
