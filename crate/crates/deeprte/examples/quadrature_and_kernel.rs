//! Tour of the angular quadrature and the Henyey-Greenstein kernel: weights,
//! symmetry moments, and discrete row normalization across anisotropy levels.

use deeprte::geometry::{build_quadrature_set, build_scattering_kernel};

fn main() {
    let quad = build_quadrature_set();
    println!("{} ordinates", quad.len());
    let total: f64 = quad.weights.iter().sum();
    let mc: f64 = quad.directions.iter().zip(&quad.weights).map(|(d, w)| w * d.c).sum();
    let ms: f64 = quad.directions.iter().zip(&quad.weights).map(|(d, w)| w * d.s).sum();
    println!("sum w = {total:.12}   sum w*c = {mc:+.3e}   sum w*s = {ms:+.3e}");
    println!("first ordinates (c, s, zeta, w):");
    for k in 0..6 {
        let d = quad.directions[k];
        println!("  {:>2}: ({:+.7}, {:+.7}, {:+.7})  w = {:.7}", k, d.c, d.s, d.zeta, quad.weights[k]);
    }

    for g in [0.0, 0.5, 0.9] {
        let kernel = build_scattering_kernel(g, &quad, false).unwrap();
        let row_sums: Vec<f64> = (0..kernel.n)
            .map(|i| (0..kernel.n).map(|j| quad.weights[j] * kernel.at(i, j)).sum())
            .collect();
        let worst = row_sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let peak = (0..kernel.n).map(|i| kernel.at(i, i)).fold(0.0, f64::max);
        println!("g = {g:>4}: max |row sum - 1| = {worst:.2e}, forward peak p(O,O) = {peak:.3}");
    }
}
