//! Runs the upwind sweeping source iteration on a constant left-edge inflow
//! and prints the convergence history plus a density profile.

use deeprte::dataset::cross_sections_two_level;
use deeprte::geometry::{build_quadrature_set, build_scattering_kernel, SpatialMesh};
use deeprte::solver::{density, sweep_solve, BoundaryFlux, Edge};

fn main() {
    let mesh = SpatialMesh::unit(40);
    let quad = build_quadrature_set();
    let xs = cross_sections_two_level(&mesh, 6.0, 3.0);
    let kernel = build_scattering_kernel(0.5, &quad, false).unwrap();
    let bc = BoundaryFlux::from_fn(&mesh, &quad, |edge, _, _| {
        if edge == Edge::Left {
            1.0
        } else {
            0.0
        }
    });

    let (flux, report) =
        sweep_solve(&xs, &kernel, &quad, &bc, &mesh, 1e-8, 1000, None).unwrap();
    println!(
        "converged = {} after {} iterations (residual {:.3e})",
        report.converged, report.iterations, report.final_residual
    );
    for (i, r) in report.residual_history.iter().enumerate().take(8) {
        println!("  iter {:>2}: residual {:.3e}", i + 1, r);
    }

    let phi = density(&flux, &quad);
    println!("density along y = 0.5 (beam axis):");
    let iy = mesh.ny / 2;
    for ix in (0..mesh.nx).step_by(4) {
        let (x, _) = mesh.centers[mesh.cell_index(ix, iy)];
        println!("  x = {x:.3}: phi = {:.5e}", phi[mesh.cell_index(ix, iy)]);
    }
}
