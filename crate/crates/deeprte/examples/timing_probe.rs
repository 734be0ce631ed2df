use deeprte::dataset::{generate_dataset, DatasetConfig};
use deeprte::model::ModelConfig;
use deeprte::training::{collocation_loss, evaluate, Collocation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let ds = generate_dataset(&DatasetConfig {
        nx: 20, ny: 20, num_train: 8, num_val: 2, seed: 1,
        ..DatasetConfig::default()
    }).unwrap();
    println!("gen 10 samples 20x20x24: {:.2}s", t0.elapsed().as_secs_f64());
    let nnz: Vec<usize> = ds.samples.iter().map(|s| s.boundary.iter().filter(|&&v| v != 0.0).count()).collect();
    println!("bc nnz per sample: {:?} (of {})", nnz, ds.samples[0].boundary.len());

    let cfg = ModelConfig::full();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0));

    // one batch-8 step, sequential then parallel-ish estimate
    let t = Instant::now();
    use rayon::prelude::*;
    let losses: Vec<f64> = ds.train().par_iter().enumerate().map(|(i, s)| {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let (l, _g) = collocation_loss(s, &params, &cfg, &mut rng, 128, Collocation::Grouped).unwrap();
        l
    }).collect();
    println!("one step (batch 8, n_col 128, fwd+bwd, parallel): {:.3}s, losses[0]={:.3e}", t.elapsed().as_secs_f64(), losses[0]);

    let t = Instant::now();
    let m = evaluate(&ds.samples[8..9], &params, &cfg).unwrap();
    println!("eval 1 sample full grid: {:.3}s rmspe {:.1}%", t.elapsed().as_secs_f64(), m.rmspe_density);
}
