use deeprte::dataset::{generate_dataset, DatasetConfig};
use deeprte::model::{forward_batch, ModelConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let ds = generate_dataset(&DatasetConfig {
        nx: 20, ny: 20, num_train: 1, num_val: 0, seed: 1,
        ..DatasetConfig::default()
    }).unwrap();
    let s = &ds.samples[0];
    let inputs = s.model_inputs();
    let nnz = inputs.bc_values.iter().filter(|&&v| v != 0.0).count();
    let cfg = ModelConfig::full();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(0));

    // 64 positions, nnz bc: one chunk worth
    let positions: Vec<(f64,f64)> = (0..64).map(|c| (s.position_coords[(c,0)], s.position_coords[(c,1)])).collect();
    let t = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let b = forward_batch(&params, &cfg, &inputs, &positions).unwrap();
        std::hint::black_box(b.tape.value(b.preds).iter().next().copied());
    }
    let per = t.elapsed().as_secs_f64()/reps as f64;
    let rows = 64*24*nnz;
    println!("forward_batch 64 pos, nnz {nnz}: {:.3}s ({} rows, {:.2} GFLOPS-equivalent)", per, rows, (rows as f64*36096.0*2.0)/per/1e9);

    // raw GEMM comparison at the same row count
    let a = Array2::<f64>::from_elem((rows, 128), 0.5);
    let w = Array2::<f64>::from_elem((128, 128), 0.1);
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(a.dot(&w)); }
    println!("raw [{}x128]x[128x128] x2 layers-eq: {:.3}s", rows, t.elapsed().as_secs_f64()/reps as f64 * 2.2);

    // tanh cost at the same scale
    let t = Instant::now();
    for _ in 0..reps { std::hint::black_box(a.mapv(f64::tanh)); }
    println!("tanh [{}x128] x3: {:.3}s", rows, t.elapsed().as_secs_f64()/reps as f64*3.0);
}
