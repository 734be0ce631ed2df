//! The boundary-approximation error decomposition: a smooth inflow, its
//! mollified particle approximation, and the triangle-inequality bound on the
//! inference error. Shown here with random parameters; the bound holds for
//! any parameter values.

use deeprte::model::ModelConfig;
use deeprte::training::error_decomposition_experiment;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig::full();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(7));
    let n = 10;
    let report =
        error_decomposition_experiment(&params, &cfg, n, 1.0 / n as f64, 1e-8, 500).unwrap();
    println!("grid {n}x{n}, {n} boundary beams:");
    println!("  boundary approximation error   {:.4e}", report.bc_approx_error);
    println!("  operator on residual (learned) {:.4e}", report.nn_residual);
    println!("  operator on residual (solver)  {:.4e}", report.solver_residual);
    println!("  weighted per-beam term         {:.4e}", report.weighted_generalization);
    println!("  assembled bound                {:.4e}", report.bound);
    println!("  direct inference error         {:.4e}", report.direct_error);
    println!("  direct <= bound: {}", report.direct_error <= report.bound);
}
