use deeprte::dataset::*;
use deeprte::model::ModelConfig;
use deeprte::training::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let lr0: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let out_scale: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let t0 = Instant::now();
    let ds = generate_dataset(&DatasetConfig {
        nx: 20, ny: 20, num_train: n_train, num_val: 6, seed: 7,
        regime: Regime::Moderate, ..DatasetConfig::default()
    }).unwrap();
    eprintln!("dataset: {:.1}s, range [{:.3e},{:.3e}]", t0.elapsed().as_secs_f64(), ds.i_min, ds.i_max);

    let model_cfg = ModelConfig::full();
    let tcfg = TrainConfig { epochs, seed: 1, lr0, checkpoint_every: 0, ..TrainConfig::default() };
    eprintln!("lr0 {lr0:.1e}, out_scale {out_scale}");
    let t0 = Instant::now();
    // out_scale multiplies the green projection init (applied via a resume-style start)
    let start = if out_scale != 1.0 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0xD5EE_D5EE);
        let mut p = model_cfg.init_params(&mut rng);
        p.tensors.get_mut("green/weight").unwrap().mapv_inplace(|v| v * out_scale);
        Some((p, OptimState::default(), Vec::new()))
    } else { None };
    let result = train(&ds, &model_cfg, &tcfg, start, |r, _, _| {
        if r.epoch % 10 == 0 { eprintln!("epoch {:>4} loss {:.4e} lr {:.2e} [{:.0}s]", r.epoch, r.mean_loss, r.lr, t0.elapsed().as_secs_f64()); }
        Ok(true)
    }).unwrap();
    eprintln!("train {:.0}s: loss {:.4e} -> {:.4e}", t0.elapsed().as_secs_f64(),
        result.history[0].mean_loss, result.history.last().unwrap().mean_loss);

    let t0 = Instant::now();
    let m = evaluate(ds.validation(), &result.params, &model_cfg).unwrap();
    eprintln!("val eval {:.0}s: mse_d {:.3e} rmspe {:.2}% (pooled {:.2}%)", t0.elapsed().as_secs_f64(), m.mse_density, m.rmspe_density, m.rmspe_pooled);

    // quick Case-I zero-shot probe
    let mut case_ds = generate_dataset(&DatasetConfig {
        nx: 20, ny: 20, num_train: 1, num_val: 0, seed: 33,
        regime: Regime::Moderate, kind: DatasetKind::Case(CaseKind::I), ..DatasetConfig::default()
    }).unwrap();
    for s in case_ds.samples.iter_mut() { denormalize_sample(s); normalize_sample(s, ds.i_min, ds.i_max).unwrap(); }
    let t0 = Instant::now();
    let mc = evaluate(&case_ds.samples, &result.params, &model_cfg).unwrap();
    eprintln!("case I eval {:.0}s: rmspe {:.2}%", t0.elapsed().as_secs_f64(), mc.rmspe_density);
}
