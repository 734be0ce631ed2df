//! Central finite differences against the reverse-mode gradients on a tiny
//! configuration: 6 ordinates, 3 coefficient mesh points, 4 boundary points.

use deeprte::dataset::FieldSample;
use deeprte::geometry::base_quadrature_set;
use deeprte::model::ModelConfig;
use deeprte::training::{loss_on_draw, CollocationDraw};
use deeprte::autodiff::ParamStore;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_sample(seed: u64) -> FieldSample {
    let quad = base_quadrature_set();
    let nq = quad.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = [(0.3, 0.4), (0.7, 0.6), (0.5, 0.2)];
    let position_coords =
        Array2::from_shape_fn((3, 2), |(i, j)| if j == 0 { positions[i].0 } else { positions[i].1 });
    let mut velocity_coords = Array2::zeros((nq, 3));
    for (k, d) in quad.directions.iter().enumerate() {
        velocity_coords[(k, 0)] = d.c;
        velocity_coords[(k, 1)] = d.s;
        velocity_coords[(k, 2)] = d.zeta;
    }
    let kernel = deeprte::geometry::build_scattering_kernel(0.4, &quad, false).unwrap();
    let mut kernel_m = Array2::zeros((nq, nq));
    for i in 0..nq {
        for j in 0..nq {
            kernel_m[(i, j)] = kernel.at(i, j);
        }
    }
    let mut phase_coords = Array2::zeros((3 * nq, 4));
    for (u, &(x, y)) in positions.iter().enumerate() {
        for k in 0..nq {
            phase_coords[(u * nq + k, 0)] = x;
            phase_coords[(u * nq + k, 1)] = y;
            phase_coords[(u * nq + k, 2)] = velocity_coords[(k, 0)];
            phase_coords[(u * nq + k, 3)] = velocity_coords[(k, 1)];
        }
    }
    FieldSample {
        phase_coords,
        boundary_coords: Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0)),
        boundary_weights: vec![0.25; 4],
        position_coords,
        velocity_coords,
        velocity_weights: quad.weights.clone(),
        boundary: (0..4).map(|_| rng.gen_range(0.1..1.0)).collect(),
        mu: Array2::from_shape_fn((3, 2), |(_, c)| {
            if c == 0 {
                rng.gen_range(5.0..8.0)
            } else {
                rng.gen_range(1.0..4.0)
            }
        }),
        scattering_kernel: kernel_m,
        intensity: (0..3 * nq).map(|_| rng.gen_range(0.0..1.0)).collect(),
        i_min: 0.0,
        i_max: 1.0,
        normalized: true,
        gen: deeprte::dataset::SampleGen {
            g: 0.4,
            mu_levels: (6.0, 3.0),
            bc: deeprte::dataset::BcSpec::Zero,
        },
    }
}

fn main() {
    let sample = micro_sample(1);
    let cfg = ModelConfig::micro();
    let params = cfg.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let draw = CollocationDraw { cells: vec![0, 1, 2], rows: (0..10).collect() };
    let inputs = sample.model_inputs();

    let loss_of = |p: &ParamStore| loss_on_draw(&sample, &inputs, p, &cfg, &draw).unwrap().0;
    let (_, grads) = loss_on_draw(&sample, &inputs, &params, &cfg, &draw).unwrap();

    let h = 1e-6;
    println!("{:<36} {:>12} {:>12}", "tensor", "|grad|", "rel err");
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        let mut fd = g.clone();
        for idx in 0..fd.len() {
            let mut plus = params.clone();
            plus.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
            fd.as_slice_mut().unwrap()[idx] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        }
        let num = (&fd - g).mapv(f64::abs).sum();
        let den = fd.mapv(f64::abs).sum().max(g.mapv(f64::abs).sum()).max(1e-300);
        let rel = num / den;
        worst = worst.max(rel);
        println!("{:<36} {:>12.3e} {:>12.3e}", name, g.mapv(f64::abs).sum(), rel);
    }
    println!("worst tensor relative error: {worst:.3e}");
}
