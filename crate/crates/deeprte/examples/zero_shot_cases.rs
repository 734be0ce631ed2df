//! Builds the three zero-shot boundary families (constant, trigonometric,
//! velocity-dependent) plus the strongly-peaked out-of-distribution form,
//! solves each, and prints density summaries.

use deeprte::dataset::{build_case_bc, cross_sections_two_level, BcSpec};
use deeprte::geometry::{build_quadrature_set, build_scattering_kernel, SpatialMesh};
use deeprte::solver::{density, sweep_solve};

fn main() {
    let mesh = SpatialMesh::unit(20);
    let quad = build_quadrature_set();
    let xs = cross_sections_two_level(&mesh, 6.0, 3.0);

    let cases = [
        ("case I (constant)", BcSpec::CaseI, 0.5),
        ("case II (trigonometric)", BcSpec::CaseII([(3.0, 7.0), (-2.0, 4.0), (1.0, -6.0), (4.0, 9.0)]), 0.5),
        (
            "case III (velocity dependent)",
            BcSpec::CaseIII([
                (3.0, 7.0, 0.5, 4.0),
                (-2.0, 4.0, -0.3, 2.0),
                (1.0, -6.0, 0.8, 5.0),
                (4.0, 9.0, 0.2, -3.0),
            ]),
            0.5,
        ),
        ("out-of-distribution (g = 0.99)", BcSpec::OodG99, 0.99),
    ];

    for (name, spec, g) in cases {
        let kernel = build_scattering_kernel(g, &quad, false).unwrap();
        let bc = build_case_bc(&spec, &mesh, &quad).unwrap();
        let (flux, report) =
            sweep_solve(&xs, &kernel, &quad, &bc, &mesh, 1e-8, 1000, None).unwrap();
        let phi = density(&flux, &quad);
        let max = phi.iter().cloned().fold(0.0, f64::max);
        let mean = phi.iter().sum::<f64>() / phi.len() as f64;
        println!(
            "{name:<32} g = {g:.2}: {} iterations, density mean {mean:.4e}, max {max:.4e}",
            report.iterations
        );
    }
}
