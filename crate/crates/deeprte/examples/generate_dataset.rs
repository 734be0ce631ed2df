//! Generates a small beam dataset, writes the container, reads it back and
//! prints its layout.

use deeprte::dataset::{generate_dataset, read_dataset, write_dataset, DatasetConfig};

fn main() {
    let cfg = DatasetConfig {
        nx: 20,
        ny: 20,
        num_train: 6,
        num_val: 2,
        seed: 11,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    println!(
        "generated {} samples, intensity range [{:.4e}, {:.4e}]",
        ds.samples.len(),
        ds.i_min,
        ds.i_max
    );

    let dir = std::env::temp_dir().join("rte-example-dataset");
    write_dataset(&dir, &ds).unwrap();
    let back = read_dataset(&dir).unwrap();
    let s = &back.samples[0];
    println!("container at {}", dir.display());
    println!("  phase_coords      {:?}", s.phase_coords.dim());
    println!("  boundary_coords   {:?} ({} nonzero values)",
        s.boundary_coords.dim(),
        s.boundary.iter().filter(|&&v| v != 0.0).count());
    println!("  position_coords   {:?}", s.position_coords.dim());
    println!("  velocity_coords   {:?}", s.velocity_coords.dim());
    println!("  mu                {:?}", s.mu.dim());
    println!("  scattering_kernel {:?}", s.scattering_kernel.dim());
    println!("  intensity         [{}]", s.intensity.len());
    println!("  beam g = {:.4}, inner (mu_t, mu_s) = {:?}", s.gen.g, s.gen.mu_levels);
}
