//! The boundary-to-intensity map is linear by construction: additivity and
//! homogeneity hold for any parameters, trained or not. This demonstrates it
//! at random initialization.

use deeprte::dataset::{generate_dataset, DatasetConfig, DatasetKind};
use deeprte::model::ModelConfig;
use deeprte::training::verify_linearity;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    // Beam samples sharing coefficient fields; labels are not needed.
    let ds = generate_dataset(&DatasetConfig {
        nx: 20,
        ny: 20,
        num_train: 10,
        num_val: 0,
        kind: DatasetKind::LinearityDelta { solve: false },
        seed: 17,
        ..DatasetConfig::default()
    })
    .unwrap();

    let cfg = ModelConfig::full();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(99));
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let report = verify_linearity(&ds.samples, &params, &cfg, &mut rng, 10, 48).unwrap();
    println!("untrained parameters, {} random pairs:", report.pairs);
    println!(
        "  additivity:  mse {:.3e}, max relative deviation {:.3e}",
        report.additivity_mse, report.additivity_max_rel
    );
    println!(
        "  homogeneity: mse {:.3e}, max relative deviation {:.3e}",
        report.homogeneity_mse, report.homogeneity_max_rel
    );
}
