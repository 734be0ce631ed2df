//! Miniature end-to-end training run: tiny model, tiny dataset, a short
//! cosine schedule, and a final validation evaluation.

use deeprte::dataset::{generate_dataset, DatasetConfig};
use deeprte::model::{count_params, ModelConfig};
use deeprte::training::{evaluate, train, TrainConfig};

fn main() {
    let ds = generate_dataset(&DatasetConfig {
        nx: 8,
        ny: 8,
        num_train: 5,
        num_val: 2,
        seed: 3,
        ..DatasetConfig::default()
    })
    .unwrap();

    let model_cfg = ModelConfig::micro();
    println!("micro model: {} parameters", count_params(&model_cfg));
    let cfg = TrainConfig {
        epochs: 50,
        batch: 2,
        n_col: 32,
        seed: 5,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let result = train(&ds, &model_cfg, &cfg, None, |r, _, _| {
        if r.epoch % 10 == 0 {
            println!("epoch {:>3}: loss {:.4e}, lr {:.2e}", r.epoch, r.mean_loss, r.lr);
        }
        Ok(true)
    })
    .unwrap();
    println!(
        "loss {:.4e} -> {:.4e}",
        result.history[0].mean_loss,
        result.history.last().unwrap().mean_loss
    );

    let metrics = evaluate(ds.validation(), &result.params, &model_cfg).unwrap();
    println!(
        "validation: density mse {:.4e}, rmspe {:.2}%",
        metrics.mse_density, metrics.rmspe_density
    );
}
