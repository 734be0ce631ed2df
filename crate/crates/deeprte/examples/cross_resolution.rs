//! Re-discretizes beam samples at coarser meshes and evaluates the same
//! parameters on each: the degradation tracks the boundary-integral
//! quadrature, not the network.

use deeprte::dataset::{generate_dataset, DatasetConfig};
use deeprte::model::ModelConfig;
use deeprte::training::cross_resolution_eval;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let ds = generate_dataset(&DatasetConfig {
        nx: 20,
        ny: 20,
        num_train: 3,
        num_val: 0,
        seed: 8,
        ..DatasetConfig::default()
    })
    .unwrap();

    let cfg = ModelConfig::full();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    let rows =
        cross_resolution_eval(ds.train(), &params, &cfg, &[20, 10, 5], 1e-8, 1000).unwrap();
    println!("{:>10} {:>14} {:>10}", "resolution", "density mse", "rmspe");
    for (res, m) in rows {
        println!("{:>7}x{:<3} {:>14.4e} {:>9.2}%", res, res, m.mse_density, m.rmspe_density);
    }
}
