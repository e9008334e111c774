mod common;

use bayesal::al_loop::predict_class;
use bayesal::bayes_mlp::{
    predictive_matrix, sample_masks, train_epochs, Architecture, ModelParams, TrainOptions,
    TrainingSet,
};
use bayesal::datasets::{generate_synthetic, GeneratorConfig, TypeMix};

fn toy(items: usize, seed: u64) -> bayesal::datasets::Dataset {
    generate_synthetic(&GeneratorConfig {
        items,
        dim_a: 4,
        dim_b: 2,
        classes: 3,
        type_mix: TypeMix {
            binary: 0.0,
            open: 1.0,
        },
        separation: 4.0,
        spread: 0.5,
        modes_per_class: 1,
        mode_decay: 1.0,
        nearest_mode_labels: false,
        hard_fraction: 0.0,
        hard_spread: 0.0,
        binary_separation: 1.0,
        transfer: 0.0,
        question_noise: 0.1,
        label_noise: 0.0,
        seed,
    })
    .unwrap()
}

fn training_set(ds: &bayesal::datasets::Dataset, range: std::ops::Range<usize>) -> TrainingSet {
    let mut t = TrainingSet::new(ds.meta().fused_dim());
    for item in &ds.items()[range] {
        t.push(&item.fused(), ds.label(item.id).unwrap()).unwrap();
    }
    t
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..4 {
        let err = common::gradient_check(seed);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn training_loss_trends_down() {
    let ds = toy(300, 3);
    let data = training_set(&ds, 0..300);
    let arch = Architecture {
        input_dim: data.dim(),
        hidden: [16, 16],
        classes: 3,
    };
    let params = ModelParams::init(&arch, 1).unwrap();
    let opts = TrainOptions {
        epochs: 30,
        learning_rate: 0.05,
        batch_size: 16,
        l2: 0.0,
    };
    let out = train_epochs(&params, &data, &opts, 2).unwrap();
    let early: f64 = out.epoch_losses[..5].iter().sum::<f64>() / 5.0;
    let late: f64 = out.epoch_losses[25..].iter().sum::<f64>() / 5.0;
    assert!(late < 0.5 * early, "loss went from {early} to {late}");
}

#[test]
fn separable_toy_reaches_high_accuracy() {
    let ds = toy(600, 4);
    let data = training_set(&ds, 0..300);
    let arch = Architecture {
        input_dim: data.dim(),
        hidden: [16, 16],
        classes: 3,
    };
    let params = ModelParams::init(&arch, 5).unwrap();
    let opts = TrainOptions {
        epochs: 40,
        learning_rate: 0.05,
        batch_size: 16,
        l2: 0.0,
    };
    let trained = train_epochs(&params, &data, &opts, 6).unwrap().params;
    let masks = sample_masks(&trained, 20, 7).unwrap();
    let held_out = &ds.items()[300..];
    let correct = held_out
        .iter()
        .filter(|it| {
            predict_class(&predictive_matrix(&masks, it.id, &it.fused()).unwrap())
                == ds.label(it.id).unwrap()
        })
        .count();
    let acc = correct as f64 / held_out.len() as f64;
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let ds = toy(50, 8);
    let data = training_set(&ds, 0..50);
    let arch = Architecture {
        input_dim: data.dim(),
        hidden: [4, 4],
        classes: 3,
    };
    let params = ModelParams::init(&arch, 9).unwrap();
    let opts = TrainOptions {
        epochs: 0,
        learning_rate: 0.05,
        batch_size: 8,
        l2: 0.0,
    };
    assert_eq!(
        train_epochs(&params, &data, &opts, 1).unwrap().params,
        params
    );
}
