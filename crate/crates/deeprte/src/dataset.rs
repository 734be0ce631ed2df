//! Training/evaluation data generation and serialization: Gaussian-mollified
//! boundary beams, the zero-shot boundary cases, two-level cross-section
//! sampling, a Gaussian-random-field interior source for the lifting
//! ablation, normalization, and the on-disk dataset container.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::container::Container;
use crate::error::RteError;
use crate::geometry::{
    build_quadrature_set, build_scattering_kernel, CrossSections, QuadratureSet, SpatialMesh,
};
use crate::model::ModelInputs;
use crate::solver::{sweep_solve, BoundaryFlux, Edge, SolveReport, EDGES};

/// Relative cutoff below which generated boundary values are stored as exact
/// zeros; entries this small are beyond anything the solver or the boundary
/// integral can register, and exact zeros let the batched model skip them.
pub const BC_SUPPORT_CUTOFF: f64 = 1e-30;

/// One Gaussian boundary beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamSpec {
    pub edge: Edge,
    /// Coordinate of the beam center along the edge (y for left/right,
    /// x for bottom/top).
    pub center: f64,
    /// Index of the beam direction in the quadrature set; must flow in
    /// through `edge`.
    pub dir_index: usize,
    pub sigma_r: f64,
    pub sigma_v: f64,
}

/// Scattering regime: the asymmetry-parameter range a dataset draws from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    NearIsotropy,
    Moderate,
    ForwardPeaking,
    Fixed(f64),
    Range(f64, f64),
}

impl Regime {
    pub fn g_range(&self) -> (f64, f64) {
        match self {
            Regime::NearIsotropy => (0.0, 0.2),
            Regime::Moderate => (0.4, 0.6),
            Regime::ForwardPeaking => (0.7, 0.9),
            Regime::Fixed(g) => (*g, *g),
            Regime::Range(a, b) => (*a, *b),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Regime::NearIsotropy => "near-isotropy".into(),
            Regime::Moderate => "moderate".into(),
            Regime::ForwardPeaking => "forward-peaking".into(),
            Regime::Fixed(g) => format!("fixed({g})"),
            Regime::Range(a, b) => format!("range({a},{b})"),
        }
    }

    pub fn parse(s: &str) -> Result<Self, RteError> {
        match s {
            "near-isotropy" => Ok(Regime::NearIsotropy),
            "moderate" => Ok(Regime::Moderate),
            "forward-peaking" => Ok(Regime::ForwardPeaking),
            other => other
                .parse::<f64>()
                .map(Regime::Fixed)
                .map_err(|_| RteError::Config(format!("unknown regime '{other}'"))),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        let (a, b) = self.g_range();
        if a == b {
            a
        } else {
            rng.gen_range(a..b)
        }
    }
}

/// How a sample's inflow boundary (or interior source) is constructed.
#[derive(Debug, Clone, PartialEq)]
pub enum BcSpec {
    /// Four Gaussian beams, one per edge.
    Delta([BeamSpec; 4]),
    /// Unit inflow on the left edge, zero elsewhere.
    CaseI,
    /// `a sin(k coord) + 5` per edge; params in edge order.
    CaseII([(f64, f64); 4]),
    /// `(a_r sin(k_r coord) + 5)(a_v sin(k_v c) + 1)(a_v sin(k_v s) + 1)`;
    /// params `(a_r, k_r, a_v, k_v)` per edge.
    CaseIII([(f64, f64, f64, f64); 4]),
    /// The fixed strongly-varying form used for the out-of-distribution
    /// scattering test.
    OodG99,
    Zero,
}

/// Gaussian mollifier `(1 / (sigma sqrt(pi))) exp(-(x - center)^2 / sigma^2)`.
pub fn mollified_delta(x: f64, center: f64, sigma: f64) -> f64 {
    let z = (x - center) / sigma;
    (-z * z).exp() / (sigma * std::f64::consts::PI.sqrt())
}

/// Two-level cross sections: `U(5,7) / U(2,4)` inside the `[0.4, 0.6]^2`
/// subdomain, `10 / 5` outside, one draw per field per sample.
pub fn sample_cross_sections(rng: &mut impl Rng, mesh: &SpatialMesh) -> CrossSections {
    let ut = rng.gen_range(5.0..7.0);
    let us = rng.gen_range(2.0..4.0);
    cross_sections_two_level(mesh, ut, us)
}

/// The two-level field with explicit inner values.
pub fn cross_sections_two_level(mesh: &SpatialMesh, ut_inner: f64, us_inner: f64) -> CrossSections {
    let mut mu_t = Vec::with_capacity(mesh.n_cells());
    let mut mu_s = Vec::with_capacity(mesh.n_cells());
    for &(x, y) in &mesh.centers {
        let inside = (0.4..0.6).contains(&x) && (0.4..0.6).contains(&y);
        mu_t.push(if inside { ut_inner } else { 10.0 });
        mu_s.push(if inside { us_inner } else { 5.0 });
    }
    CrossSections::new(mu_t, mu_s).expect("two-level cross sections")
}

/// Draws one beam per edge: centers from edge cell centers, directions from
/// the inflow-compatible quadrature directions, Gaussian widths
/// `sqrt(2) U(range)` shared across the four edges.
pub fn sample_beam_specs(
    rng: &mut impl Rng,
    mesh: &SpatialMesh,
    quad: &QuadratureSet,
    sigma_r_range: (f64, f64),
    sigma_v_range: (f64, f64),
) -> [BeamSpec; 4] {
    let sigma_r = std::f64::consts::SQRT_2 * rng.gen_range(sigma_r_range.0..sigma_r_range.1);
    let sigma_v = std::f64::consts::SQRT_2 * rng.gen_range(sigma_v_range.0..sigma_v_range.1);
    EDGES.map(|edge| {
        let n_cells = edge.n_cells(mesh);
        let cell = rng.gen_range(0..n_cells);
        let center = match edge {
            Edge::Left | Edge::Right => edge.cell_center(mesh, cell).1,
            Edge::Bottom | Edge::Top => edge.cell_center(mesh, cell).0,
        };
        let inflow: Vec<usize> =
            (0..quad.len()).filter(|&k| edge.is_inflow(&quad.directions[k])).collect();
        let dir_index = inflow[rng.gen_range(0..inflow.len())];
        BeamSpec { edge, center, dir_index, sigma_r, sigma_v }
    })
}

/// Evaluates the four-beam mollified boundary condition at every inflow
/// sample. Values below `cutoff_rel` times the peak are stored as exact
/// zeros.
pub fn build_delta_bc(
    specs: &[BeamSpec; 4],
    mesh: &SpatialMesh,
    quad: &QuadratureSet,
    cutoff_rel: f64,
) -> Result<BoundaryFlux, RteError> {
    for spec in specs {
        if !spec.edge.is_inflow(&quad.directions[spec.dir_index]) {
            return Err(RteError::Dataset(format!(
                "beam direction {} does not flow in through its edge",
                spec.dir_index
            )));
        }
        if spec.sigma_r <= 0.0 || spec.sigma_v <= 0.0 {
            return Err(RteError::Dataset("beam widths must be positive".into()));
        }
    }
    let mut bc = BoundaryFlux::from_fn(mesh, quad, |edge, center, d| {
        // Each edge carries its own beam; terms from the other edges are
        // zero there (their angular factors are inflow-incompatible).
        let spec = specs[edge.index()];
        let coord = match edge {
            Edge::Left | Edge::Right => center.1,
            Edge::Bottom | Edge::Top => center.0,
        };
        let beam_dir = quad.directions[spec.dir_index];
        mollified_delta(coord, spec.center, spec.sigma_r)
            * mollified_delta(d.c, beam_dir.c, spec.sigma_v)
            * mollified_delta(d.s, beam_dir.s, spec.sigma_v)
    });
    let peak = bc.values.iter().cloned().fold(0.0, f64::max);
    if cutoff_rel > 0.0 && peak > 0.0 {
        let cut = cutoff_rel * peak;
        for v in bc.values.iter_mut() {
            if *v < cut {
                *v = 0.0;
            }
        }
    }
    Ok(bc)
}

/// Zero-shot boundary cases. Case parameters are drawn here when the spec
/// variant carries none.
pub fn build_case_bc(
    spec: &BcSpec,
    mesh: &SpatialMesh,
    quad: &QuadratureSet,
) -> Result<BoundaryFlux, RteError> {
    let bc = match spec {
        BcSpec::Zero => BoundaryFlux::zero(mesh, quad),
        BcSpec::CaseI => BoundaryFlux::from_fn(mesh, quad, |edge, _, _| {
            if edge == Edge::Left {
                1.0
            } else {
                0.0
            }
        }),
        BcSpec::CaseII(params) => BoundaryFlux::from_fn(mesh, quad, |edge, center, _| {
            let (a, k) = params[edge.index()];
            let coord = edge_coord(edge, center);
            a * (k * coord).sin() + 5.0
        }),
        BcSpec::CaseIII(params) => BoundaryFlux::from_fn(mesh, quad, |edge, center, d| {
            let (a_r, k_r, a_v, k_v) = params[edge.index()];
            let coord = edge_coord(edge, center);
            (a_r * (k_r * coord).sin() + 5.0)
                * (a_v * (k_v * d.c).sin() + 1.0)
                * (a_v * (k_v * d.s).sin() + 1.0)
        }),
        BcSpec::OodG99 => BoundaryFlux::from_fn(mesh, quad, |edge, center, d| {
            let coord = edge_coord(edge, center);
            let pi = std::f64::consts::PI;
            (5.0 * (2.0 * pi * coord).sin() + 5.0)
                * ((pi * d.c).sin() + 1.0)
                * ((pi * d.s).sin() + 1.0)
        }),
        BcSpec::Delta(beams) => build_delta_bc(beams, mesh, quad, BC_SUPPORT_CUTOFF)?,
    };
    Ok(bc)
}

fn edge_coord(edge: Edge, center: (f64, f64)) -> f64 {
    match edge {
        Edge::Left | Edge::Right => center.1,
        Edge::Bottom | Edge::Top => center.0,
    }
}

/// Draws the random parameters for Case II.
pub fn draw_case_ii(rng: &mut impl Rng) -> BcSpec {
    BcSpec::CaseII(std::array::from_fn(|_| {
        (rng.gen_range(-5.0..5.0), rng.gen_range(-10.0..10.0))
    }))
}

/// Draws the random parameters for Case III.
pub fn draw_case_iii(rng: &mut impl Rng) -> BcSpec {
    BcSpec::CaseIII(std::array::from_fn(|_| {
        (
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-6.0..6.0),
        )
    }))
}

/// Spectral-synthesis parameters for the Gaussian-random-field source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrfSpectrum {
    /// Standard deviation of the synthesized fluctuation.
    pub amplitude: f64,
    /// Isotropic power-law exponent on `|k|`.
    pub exponent: f64,
    /// Frequencies above `cutoff_frac * Nyquist` are zeroed.
    pub cutoff_frac: f64,
    /// Mean offset added after synthesis.
    pub offset: f64,
}

impl Default for GrfSpectrum {
    fn default() -> Self {
        Self { amplitude: 1.0, exponent: 2.5, cutoff_frac: 0.5, offset: 2.0 }
    }
}

/// Synthesizes a non-negative spatial Gaussian random field in the frequency
/// domain (power-law-filtered white noise, inverse transformed) and
/// replicates it across angles.
pub fn grf_source(
    rng: &mut impl Rng,
    mesh: &SpatialMesh,
    quad: &QuadratureSet,
    spectrum: &GrfSpectrum,
) -> Array3<f64> {
    let (nx, ny) = (mesh.nx, mesh.ny);
    let mut field = Array2::<f64>::zeros((nx, ny));

    if spectrum.amplitude != 0.0 {
        // White noise -> FFT -> isotropic power-law filter -> inverse FFT.
        // Real input keeps the spectrum Hermitian, so the output is real up
        // to rounding.
        let mut grid: Vec<Complex<f64>> = (0..nx * ny)
            .map(|_| Complex::new(rng.sample::<f64, _>(rand_distr::StandardNormal), 0.0))
            .collect();
        fft_2d(&mut grid, nx, ny, false);
        let nyquist = (nx.min(ny) / 2) as f64;
        let cutoff = spectrum.cutoff_frac * nyquist;
        for ix in 0..nx {
            for iy in 0..ny {
                let fx = signed_freq(ix, nx);
                let fy = signed_freq(iy, ny);
                let k = (fx * fx + fy * fy).sqrt();
                let gain = if k == 0.0 || k > cutoff { 0.0 } else { k.powf(-spectrum.exponent) };
                grid[ix * ny + iy] *= gain;
            }
        }
        fft_2d(&mut grid, nx, ny, true);
        let max_imag = grid.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        debug_assert!(max_imag < 1e-12, "imaginary residue {max_imag}");
        for ix in 0..nx {
            for iy in 0..ny {
                field[(ix, iy)] = grid[ix * ny + iy].re;
            }
        }
        // Scale fluctuations to the requested amplitude, then keep the field
        // non-negative around the offset.
        let n = (nx * ny) as f64;
        let mean = field.sum() / n;
        let std = (field.mapv(|v| (v - mean) * (v - mean)).sum() / n).sqrt();
        if std > 0.0 {
            field.mapv_inplace(|v| (v - mean) / std * spectrum.amplitude);
        }
        let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
        if spectrum.offset + min < 0.0 {
            let shrink = spectrum.offset / (-min);
            field.mapv_inplace(|v| v * shrink);
        }
    }

    let mut out = Array3::<f64>::zeros((nx, ny, quad.len()));
    for ix in 0..nx {
        for iy in 0..ny {
            let v = spectrum.offset + field[(ix, iy)];
            for k in 0..quad.len() {
                out[(ix, iy, k)] = v;
            }
        }
    }
    out
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

fn fft_2d(grid: &mut [Complex<f64>], nx: usize, ny: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft_rows = if inverse { planner.plan_fft_inverse(ny) } else { planner.plan_fft_forward(ny) };
    for row in grid.chunks_exact_mut(ny) {
        fft_rows.process(row);
    }
    let fft_cols = if inverse { planner.plan_fft_inverse(nx) } else { planner.plan_fft_forward(nx) };
    let mut col = vec![Complex::new(0.0, 0.0); nx];
    for iy in 0..ny {
        for ix in 0..nx {
            col[ix] = grid[ix * ny + iy];
        }
        fft_cols.process(&mut col);
        for ix in 0..nx {
            grid[ix * ny + iy] = col[ix];
        }
    }
    if inverse {
        let scale = 1.0 / (nx * ny) as f64;
        for v in grid.iter_mut() {
            *v *= scale;
        }
    }
}

/// What kind of dataset a generator run produces.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// Gaussian-beam boundary conditions, random two-level cross sections.
    Delta,
    /// Delta beams with fixed cross sections and kernel, for linearity
    /// studies (labels still come from the solver unless skipped).
    LinearityDelta { solve: bool },
    /// Zero-shot evaluation sets.
    Case(CaseKind),
    /// Attenuation ablation: no scattering, single-channel mu.
    AblationJ,
    /// Lifting ablation: zero inflow, random-field interior source.
    AblationL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    I,
    II,
    III,
    Ood99,
}

impl CaseKind {
    pub fn parse(s: &str) -> Result<Self, RteError> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(CaseKind::I),
            "II" | "2" => Ok(CaseKind::II),
            "III" | "3" => Ok(CaseKind::III),
            "OOD" | "OOD99" | "G99" => Ok(CaseKind::Ood99),
            other => Err(RteError::Config(format!("unknown case '{other}'"))),
        }
    }
}

/// Generator configuration; defaults mirror the reference dataset recipe.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub nx: usize,
    pub ny: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub regime: Regime,
    pub kind: DatasetKind,
    pub seed: u64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub sigma_r_range: (f64, f64),
    pub sigma_v_range: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            nx: 40,
            ny: 40,
            num_train: 800,
            num_val: 200,
            regime: Regime::Moderate,
            kind: DatasetKind::Delta,
            seed: 0,
            solver_tol: 1e-8,
            solver_max_iter: 1000,
            sigma_r_range: (0.005, 0.02),
            sigma_v_range: (0.005, 0.01),
        }
    }
}

/// One training/evaluation record.
#[derive(Debug, Clone)]
pub struct FieldSample {
    /// `[N_coords, 4]` phase coordinates `(x, y, c, s)`, cell-major with the
    /// quadrature direction as the inner index.
    pub phase_coords: Array2<f64>,
    pub boundary_coords: Array2<f64>,
    pub boundary_weights: Vec<f64>,
    pub position_coords: Array2<f64>,
    /// `[N_quad, 3]` columns `(c, s, zeta)`.
    pub velocity_coords: Array2<f64>,
    pub velocity_weights: Vec<f64>,
    /// Boundary (or interior-source) values the prediction is linear in.
    pub boundary: Vec<f64>,
    /// `[N_mesh, 1 or 2]` columns `(mu_t[, mu_s])`.
    pub mu: Array2<f64>,
    /// `[N_quad, N_quad]`; empty (0x0) for the attenuation ablation.
    pub scattering_kernel: Array2<f64>,
    /// Intensity label per phase coordinate.
    pub intensity: Vec<f64>,
    pub i_min: f64,
    pub i_max: f64,
    pub normalized: bool,
    /// Generator metadata, kept so features can be re-discretized at other
    /// resolutions.
    pub gen: SampleGen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleGen {
    pub g: f64,
    /// Inner-subdomain cross-section values `(mu_t, mu_s)`.
    pub mu_levels: (f64, f64),
    pub bc: BcSpec,
}

impl FieldSample {
    pub fn n_quad(&self) -> usize {
        self.velocity_coords.nrows()
    }

    /// Model-facing view of this sample's features.
    pub fn model_inputs(&self) -> ModelInputs {
        let nq = self.n_quad();
        let mut quad_dirs = Array2::zeros((nq, 2));
        for k in 0..nq {
            quad_dirs[(k, 0)] = self.velocity_coords[(k, 0)];
            quad_dirs[(k, 1)] = self.velocity_coords[(k, 1)];
        }
        ModelInputs {
            mesh_coords: self.position_coords.clone(),
            mu: self.mu.clone(),
            quad_dirs,
            quad_weights: self.velocity_weights.clone(),
            kernel: self.scattering_kernel.clone(),
            bc_coords: self.boundary_coords.clone(),
            bc_weights: self.boundary_weights.clone(),
            bc_values: self.boundary.clone(),
        }
    }

    /// Phase queries `(x, y, dir_index)` for every phase coordinate row.
    pub fn phase_queries(&self) -> Vec<(f64, f64, usize)> {
        let nq = self.n_quad();
        (0..self.phase_coords.nrows())
            .map(|i| (self.phase_coords[(i, 0)], self.phase_coords[(i, 1)], i % nq))
            .collect()
    }
}

/// An in-memory dataset: samples plus the train/validation split and the
/// normalization constants taken over the training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<FieldSample>,
    pub num_train: usize,
    pub i_min: f64,
    pub i_max: f64,
    pub normalized: bool,
    pub seed: u64,
    pub config_echo: String,
}

impl Dataset {
    pub fn train(&self) -> &[FieldSample] {
        &self.samples[..self.num_train]
    }

    pub fn validation(&self) -> &[FieldSample] {
        &self.samples[self.num_train..]
    }
}

/// Affine label normalization: `label <- (I - i_min) / (i_max - i_min)`;
/// boundary values are scaled by the linear factor so the boundary-integral
/// linearity carries over to normalized quantities.
pub fn normalize_sample(sample: &mut FieldSample, i_min: f64, i_max: f64) -> Result<(), RteError> {
    if !(i_max > i_min) {
        return Err(RteError::Dataset(format!(
            "degenerate normalization range [{i_min}, {i_max}]"
        )));
    }
    let scale = 1.0 / (i_max - i_min);
    for v in sample.intensity.iter_mut() {
        *v = (*v - i_min) * scale;
    }
    for v in sample.boundary.iter_mut() {
        *v *= scale;
    }
    sample.i_min = i_min;
    sample.i_max = i_max;
    sample.normalized = true;
    Ok(())
}

/// Inverse of [`normalize_sample`] on the label (and boundary) arrays.
pub fn denormalize_sample(sample: &mut FieldSample) {
    if !sample.normalized {
        return;
    }
    let scale = sample.i_max - sample.i_min;
    for v in sample.intensity.iter_mut() {
        *v = *v * scale + sample.i_min;
    }
    for v in sample.boundary.iter_mut() {
        *v *= scale;
    }
    sample.normalized = false;
}

/// Maps normalized intensity predictions back to physical scale.
pub fn denormalize_values(values: &[f64], i_min: f64, i_max: f64) -> Vec<f64> {
    values.iter().map(|v| v * (i_max - i_min) + i_min).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent per-sample RNG stream for `(seed, index, attempt)`.
pub fn sample_rng(seed: u64, index: u64, attempt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ splitmix64(index.wrapping_add(1)) ^ splitmix64(attempt.wrapping_mul(0x9e37)),
    ))
}

/// Generates a dataset: per-sample RNG streams (deterministic and
/// order-independent), solver labels, rejection of non-converged solves, and
/// normalization constants from the training split.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset, RteError> {
    let mesh = SpatialMesh::new(crate::geometry::Domain2D::unit(), cfg.nx, cfg.ny)?;
    let quad = build_quadrature_set();
    let total = cfg.num_train + cfg.num_val;

    let samples: Result<Vec<FieldSample>, RteError> = (0..total)
        .into_par_iter()
        .map(|idx| generate_sample(cfg, &mesh, &quad, idx as u64))
        .collect();
    let samples = samples?;

    let mut i_min = f64::INFINITY;
    let mut i_max = f64::NEG_INFINITY;
    for sample in samples.iter().take(cfg.num_train.max(1)) {
        for &v in &sample.intensity {
            i_min = i_min.min(v);
            i_max = i_max.max(v);
        }
    }
    // Label-free runs (linearity fixtures with solving skipped) stay
    // unnormalized: there is no intensity range to normalize against.
    let normalized = i_max > i_min;
    let mut samples = samples;
    if normalized {
        for sample in samples.iter_mut() {
            normalize_sample(sample, i_min, i_max)?;
        }
    } else {
        (i_min, i_max) = (0.0, 1.0);
    }

    Ok(Dataset {
        samples,
        num_train: cfg.num_train,
        i_min,
        i_max,
        normalized,
        seed: cfg.seed,
        config_echo: format!("{cfg:?}"),
    })
}

fn generate_sample(
    cfg: &DatasetConfig,
    mesh: &SpatialMesh,
    quad: &QuadratureSet,
    index: u64,
) -> Result<FieldSample, RteError> {
    for attempt in 0..8u64 {
        let mut rng = sample_rng(cfg.seed, index, attempt);
        let (sample, report) = draw_and_solve(cfg, mesh, quad, &mut rng)?;
        if report.converged {
            return Ok(sample);
        }
        eprintln!(
            "sample {index} attempt {attempt}: solver stalled at residual {:.3e}, redrawing",
            report.final_residual
        );
    }
    Err(RteError::Dataset(format!("sample {index}: solver failed to converge after 8 redraws")))
}

fn draw_and_solve(
    cfg: &DatasetConfig,
    mesh: &SpatialMesh,
    quad: &QuadratureSet,
    rng: &mut ChaCha8Rng,
) -> Result<(FieldSample, SolveReport), RteError> {
    // Draw order is fixed: g, cross sections, boundary, then extras.
    let (g, xs, mu_levels) = match &cfg.kind {
        DatasetKind::LinearityDelta { .. } => {
            // Fixed coefficients shared by every sample of the run.
            (0.5, cross_sections_two_level(mesh, 6.0, 3.0), (6.0, 3.0))
        }
        DatasetKind::AblationJ => {
            let g = cfg.regime.draw(rng);
            let ut = rng.gen_range(5.0..7.0);
            let mut xs = cross_sections_two_level(mesh, ut, 0.0);
            xs.mu_s.iter_mut().for_each(|v| *v = 0.0);
            (g, xs, (ut, 0.0))
        }
        _ => {
            let g = cfg.regime.draw(rng);
            let ut = rng.gen_range(5.0..7.0);
            let us = rng.gen_range(2.0..4.0);
            (g, cross_sections_two_level(mesh, ut, us), (ut, us))
        }
    };
    let kernel = build_scattering_kernel(g, quad, false)?;

    let bc_spec = match &cfg.kind {
        DatasetKind::Delta | DatasetKind::LinearityDelta { .. } | DatasetKind::AblationJ => {
            BcSpec::Delta(sample_beam_specs(rng, mesh, quad, cfg.sigma_r_range, cfg.sigma_v_range))
        }
        DatasetKind::Case(CaseKind::I) => BcSpec::CaseI,
        DatasetKind::Case(CaseKind::II) => draw_case_ii(rng),
        DatasetKind::Case(CaseKind::III) => draw_case_iii(rng),
        DatasetKind::Case(CaseKind::Ood99) => BcSpec::OodG99,
        DatasetKind::AblationL => BcSpec::Zero,
    };
    let bc = build_case_bc(&bc_spec, mesh, quad)?;

    let source = match &cfg.kind {
        DatasetKind::AblationL => Some(grf_source(rng, mesh, quad, &GrfSpectrum::default())),
        _ => None,
    };

    let skip_solve = matches!(cfg.kind, DatasetKind::LinearityDelta { solve: false });
    let (flux, report) = if skip_solve {
        (crate::solver::AngularFlux::zeros(mesh, quad), SolveReport {
            iterations: 0,
            final_residual: 0.0,
            converged: true,
            residual_history: Vec::new(),
        })
    } else {
        sweep_solve(
            &xs,
            &kernel,
            quad,
            &bc,
            mesh,
            cfg.solver_tol,
            cfg.solver_max_iter,
            source.as_ref(),
        )?
    };

    let sample = assemble_sample(cfg, mesh, quad, &kernel, &xs, &bc, source.as_ref(), &flux, SampleGen {
        g,
        mu_levels,
        bc: bc_spec,
    });
    Ok((sample, report))
}

#[allow(clippy::too_many_arguments)]
fn assemble_sample(
    cfg: &DatasetConfig,
    mesh: &SpatialMesh,
    quad: &QuadratureSet,
    kernel: &crate::geometry::ScatteringKernel,
    xs: &CrossSections,
    bc: &BoundaryFlux,
    source: Option<&Array3<f64>>,
    flux: &crate::solver::AngularFlux,
    gen: SampleGen,
) -> FieldSample {
    let nq = quad.len();
    let n_cells = mesh.n_cells();

    let mut phase_coords = Array2::zeros((n_cells * nq, 4));
    let mut intensity = vec![0.0; n_cells * nq];
    for (cell, &(x, y)) in mesh.centers.iter().enumerate() {
        let ix = cell / mesh.ny;
        let iy = cell % mesh.ny;
        for k in 0..nq {
            let row = cell * nq + k;
            phase_coords[(row, 0)] = x;
            phase_coords[(row, 1)] = y;
            phase_coords[(row, 2)] = quad.directions[k].c;
            phase_coords[(row, 3)] = quad.directions[k].s;
            intensity[row] = flux.values[(ix, iy, k)];
        }
    }

    let mut position_coords = Array2::zeros((n_cells, 2));
    for (cell, &(x, y)) in mesh.centers.iter().enumerate() {
        position_coords[(cell, 0)] = x;
        position_coords[(cell, 1)] = y;
    }

    let mu_cols = if matches!(cfg.kind, DatasetKind::AblationJ) { 1 } else { 2 };
    let mut mu = Array2::zeros((n_cells, mu_cols));
    for cell in 0..n_cells {
        mu[(cell, 0)] = xs.mu_t[cell];
        if mu_cols == 2 {
            mu[(cell, 1)] = xs.mu_s[cell];
        }
    }

    let mut velocity_coords = Array2::zeros((nq, 3));
    for (k, d) in quad.directions.iter().enumerate() {
        velocity_coords[(k, 0)] = d.c;
        velocity_coords[(k, 1)] = d.s;
        velocity_coords[(k, 2)] = d.zeta;
    }

    let scattering_kernel = if matches!(cfg.kind, DatasetKind::AblationJ) {
        Array2::zeros((0, 0))
    } else {
        let mut m = Array2::zeros((nq, nq));
        for i in 0..nq {
            for j in 0..nq {
                m[(i, j)] = kernel.at(i, j);
            }
        }
        m
    };

    // Integration features: inflow boundary for the standard datasets, the
    // interior phase grid for the lifting ablation.
    let (boundary_coords, boundary_weights, boundary) = match source {
        None => {
            let mut coords = Array2::zeros((bc.len(), 4));
            for (i, &(x, y, k)) in bc.coords.iter().enumerate() {
                coords[(i, 0)] = x;
                coords[(i, 1)] = y;
                coords[(i, 2)] = quad.directions[k].c;
                coords[(i, 3)] = quad.directions[k].s;
            }
            (coords, bc.weights.clone(), bc.values.clone())
        }
        Some(src) => {
            let cell_area = mesh.dx * mesh.dy;
            let mut coords = Array2::zeros((n_cells * nq, 4));
            let mut weights = vec![0.0; n_cells * nq];
            let mut values = vec![0.0; n_cells * nq];
            for (cell, &(x, y)) in mesh.centers.iter().enumerate() {
                let ix = cell / mesh.ny;
                let iy = cell % mesh.ny;
                for k in 0..nq {
                    let row = cell * nq + k;
                    coords[(row, 0)] = x;
                    coords[(row, 1)] = y;
                    coords[(row, 2)] = quad.directions[k].c;
                    coords[(row, 3)] = quad.directions[k].s;
                    weights[row] = cell_area * quad.weights[k];
                    values[row] = src[(ix, iy, k)];
                }
            }
            (coords, weights, values)
        }
    };

    FieldSample {
        phase_coords,
        boundary_coords,
        boundary_weights,
        position_coords,
        velocity_coords,
        velocity_weights: quad.weights.clone(),
        boundary,
        mu,
        scattering_kernel,
        intensity,
        i_min: 0.0,
        i_max: 1.0,
        normalized: false,
        gen,
    }
}

/// Re-discretizes a delta-beam sample at another resolution: same beams,
/// same two-level coefficients, labels re-solved on the coarser grid.
pub fn rebuild_sample_at_resolution(
    sample: &FieldSample,
    nx: usize,
    ny: usize,
    solver_tol: f64,
    solver_max_iter: usize,
) -> Result<FieldSample, RteError> {
    let mesh = SpatialMesh::new(crate::geometry::Domain2D::unit(), nx, ny)?;
    let quad = build_quadrature_set();
    let xs = cross_sections_two_level(&mesh, sample.gen.mu_levels.0, sample.gen.mu_levels.1);
    let kernel = build_scattering_kernel(sample.gen.g, &quad, false)?;
    let bc = build_case_bc(&sample.gen.bc, &mesh, &quad)?;
    let (flux, report) =
        sweep_solve(&xs, &kernel, &quad, &bc, &mesh, solver_tol, solver_max_iter, None)?;
    if !report.converged {
        return Err(RteError::NotConverged {
            iterations: report.iterations,
            residual: report.final_residual,
        });
    }
    let cfg = DatasetConfig { nx, ny, ..DatasetConfig::default() };
    let mut rebuilt =
        assemble_sample(&cfg, &mesh, &quad, &kernel, &xs, &bc, None, &flux, sample.gen.clone());
    if sample.normalized {
        normalize_sample(&mut rebuilt, sample.i_min, sample.i_max)?;
    }
    Ok(rebuilt)
}

const GEN_KIND_DELTA: f64 = 0.0;
const GEN_KIND_CASE_I: f64 = 1.0;
const GEN_KIND_CASE_II: f64 = 2.0;
const GEN_KIND_CASE_III: f64 = 3.0;
const GEN_KIND_OOD: f64 = 4.0;
const GEN_KIND_ZERO: f64 = 5.0;

fn encode_bc_spec(spec: &BcSpec) -> (f64, Vec<f64>) {
    match spec {
        BcSpec::Delta(beams) => {
            let mut p = Vec::with_capacity(20);
            for b in beams {
                p.extend_from_slice(&[
                    b.edge.index() as f64,
                    b.center,
                    b.dir_index as f64,
                    b.sigma_r,
                    b.sigma_v,
                ]);
            }
            (GEN_KIND_DELTA, p)
        }
        BcSpec::CaseI => (GEN_KIND_CASE_I, vec![0.0; 20]),
        BcSpec::CaseII(params) => {
            let mut p = Vec::with_capacity(20);
            for (a, k) in params {
                p.extend_from_slice(&[*a, *k, 0.0, 0.0, 0.0]);
            }
            (GEN_KIND_CASE_II, p)
        }
        BcSpec::CaseIII(params) => {
            let mut p = Vec::with_capacity(20);
            for (ar, kr, av, kv) in params {
                p.extend_from_slice(&[*ar, *kr, *av, *kv, 0.0]);
            }
            (GEN_KIND_CASE_III, p)
        }
        BcSpec::OodG99 => (GEN_KIND_OOD, vec![0.0; 20]),
        BcSpec::Zero => (GEN_KIND_ZERO, vec![0.0; 20]),
    }
}

fn decode_bc_spec(kind: f64, p: &[f64]) -> Result<BcSpec, RteError> {
    let spec = if kind == GEN_KIND_DELTA {
        let mut beams = Vec::with_capacity(4);
        for b in 0..4 {
            let o = b * 5;
            beams.push(BeamSpec {
                edge: EDGES[p[o] as usize],
                center: p[o + 1],
                dir_index: p[o + 2] as usize,
                sigma_r: p[o + 3],
                sigma_v: p[o + 4],
            });
        }
        BcSpec::Delta(beams.try_into().expect("four beams"))
    } else if kind == GEN_KIND_CASE_I {
        BcSpec::CaseI
    } else if kind == GEN_KIND_CASE_II {
        BcSpec::CaseII(std::array::from_fn(|e| (p[e * 5], p[e * 5 + 1])))
    } else if kind == GEN_KIND_CASE_III {
        BcSpec::CaseIII(std::array::from_fn(|e| {
            (p[e * 5], p[e * 5 + 1], p[e * 5 + 2], p[e * 5 + 3])
        }))
    } else if kind == GEN_KIND_OOD {
        BcSpec::OodG99
    } else if kind == GEN_KIND_ZERO {
        BcSpec::Zero
    } else {
        return Err(RteError::Dataset(format!("unknown bc kind tag {kind}")));
    };
    Ok(spec)
}

/// Serializes a dataset into the manifest + blob container.
pub fn write_dataset(path: &std::path::Path, dataset: &Dataset) -> Result<(), RteError> {
    let n = dataset.samples.len();
    if n == 0 {
        return Err(RteError::Dataset("refusing to write an empty dataset".into()));
    }
    let mut c = Container::new("dataset");

    let stack2 = |get: &dyn Fn(&FieldSample) -> &Array2<f64>| -> (Vec<usize>, Vec<f64>) {
        let (r, cdim) = get(&dataset.samples[0]).dim();
        let mut data = Vec::with_capacity(n * r * cdim);
        for s in &dataset.samples {
            data.extend(get(s).iter());
        }
        (vec![n, r, cdim], data)
    };
    let stack1 = |get: &dyn Fn(&FieldSample) -> &Vec<f64>| -> (Vec<usize>, Vec<f64>) {
        let r = get(&dataset.samples[0]).len();
        let mut data = Vec::with_capacity(n * r);
        for s in &dataset.samples {
            data.extend(get(s).iter());
        }
        (vec![n, r], data)
    };

    let (shape, data) = stack2(&|s| &s.phase_coords);
    c.insert("phase_coords", shape, data);
    let (shape, data) = stack2(&|s| &s.boundary_coords);
    c.insert("boundary_coords", shape, data);
    let (shape, data) = stack1(&|s| &s.boundary_weights);
    c.insert("boundary_weights", shape, data);
    let (shape, data) = stack2(&|s| &s.position_coords);
    c.insert("position_coords", shape, data);
    let (shape, data) = stack2(&|s| &s.velocity_coords);
    c.insert("velocity_coords", shape, data);
    let (shape, data) = stack1(&|s| &s.velocity_weights);
    c.insert("velocity_weights", shape, data);
    let (shape, data) = stack1(&|s| &s.boundary);
    c.insert("boundary", shape, data);
    let (shape, data) = stack2(&|s| &s.mu);
    c.insert("mu", shape, data);
    let (shape, data) = stack2(&|s| &s.scattering_kernel);
    c.insert("scattering_kernel", shape, data);
    let (shape, data) = stack1(&|s| &s.intensity);
    c.insert("intensity", shape, data);

    let mut gen_data = Vec::with_capacity(n * 24);
    for s in &dataset.samples {
        let (kind, params) = encode_bc_spec(&s.gen.bc);
        gen_data.push(s.gen.g);
        gen_data.push(s.gen.mu_levels.0);
        gen_data.push(s.gen.mu_levels.1);
        gen_data.push(kind);
        gen_data.extend(params);
    }
    c.insert("gen_params", vec![n, 24], gen_data);

    c.meta_json("num_train", serde_json::json!(dataset.num_train));
    c.meta_json("num_val", serde_json::json!(n - dataset.num_train));
    c.meta_json("i_min", serde_json::json!(dataset.i_min));
    c.meta_json("i_max", serde_json::json!(dataset.i_max));
    c.meta_json("normalized", serde_json::json!(dataset.normalized));
    c.meta_json("seed", serde_json::json!(dataset.seed));
    c.meta_str("mu_columns", if dataset.samples[0].mu.ncols() == 1 { "mu_t" } else { "mu_t,mu_s" });
    c.meta_str("generator_config", &dataset.config_echo);
    c.write(path)
}

/// Loads a dataset container written by [`write_dataset`].
pub fn read_dataset(path: &std::path::Path) -> Result<Dataset, RteError> {
    let c = Container::read(path)?;
    let (shape, _) = c.get("phase_coords")?;
    let n = shape[0];

    let arr2 = |name: &str, s: usize| -> Result<Array2<f64>, RteError> {
        let (shape, data) = c.get(name)?;
        let (r, cols) = (shape[1], shape[2]);
        let start = s * r * cols;
        Ok(Array2::from_shape_vec((r, cols), data[start..start + r * cols].to_vec())
            .map_err(|e| RteError::Container(e.to_string()))?)
    };
    let arr1 = |name: &str, s: usize| -> Result<Vec<f64>, RteError> {
        let (shape, data) = c.get(name)?;
        let r = shape[1];
        Ok(data[s * r..(s + 1) * r].to_vec())
    };

    let i_min = c.get_meta_f64("i_min").unwrap_or(0.0);
    let i_max = c.get_meta_f64("i_max").unwrap_or(1.0);
    let normalized =
        c.meta.get("normalized").and_then(|v| v.as_bool()).unwrap_or(false);

    let mut samples = Vec::with_capacity(n);
    for s in 0..n {
        let gen_row = arr1("gen_params", s)?;
        let gen = SampleGen {
            g: gen_row[0],
            mu_levels: (gen_row[1], gen_row[2]),
            bc: decode_bc_spec(gen_row[3], &gen_row[4..])?,
        };
        samples.push(FieldSample {
            phase_coords: arr2("phase_coords", s)?,
            boundary_coords: arr2("boundary_coords", s)?,
            boundary_weights: arr1("boundary_weights", s)?,
            position_coords: arr2("position_coords", s)?,
            velocity_coords: arr2("velocity_coords", s)?,
            velocity_weights: arr1("velocity_weights", s)?,
            boundary: arr1("boundary", s)?,
            mu: arr2("mu", s)?,
            scattering_kernel: arr2("scattering_kernel", s)?,
            intensity: arr1("intensity", s)?,
            i_min,
            i_max,
            normalized,
            gen,
        });
    }

    Ok(Dataset {
        samples,
        num_train: c.get_meta_u64("num_train").unwrap_or(n as u64) as usize,
        i_min,
        i_max,
        normalized,
        seed: c.get_meta_u64("seed").unwrap_or(0),
        config_echo: c.get_meta_str("generator_config").unwrap_or("").to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mollifier_peak_decay_and_mass() {
        let peak = mollified_delta(0.3, 0.3, 0.01);
        assert_relative_eq!(peak, 1.0 / (0.01 * std::f64::consts::PI.sqrt()), max_relative = 1e-12);
        assert_relative_eq!(peak, 56.4190, epsilon = 1e-4);
        assert!(mollified_delta(100.0, 0.3, 0.01) == 0.0);
        // Trapezoid mass over +-8 sigma.
        let sigma = 0.01;
        let n = 200_000;
        let a = 0.3 - 8.0 * sigma;
        let h = 16.0 * sigma / n as f64;
        let mut mass = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            mass += w * mollified_delta(x, 0.3, sigma) * h;
        }
        assert!((mass - 1.0).abs() < 1e-9, "mass {mass}");
    }

    #[test]
    fn cross_sections_follow_subdomain_rule() {
        let mesh = SpatialMesh::unit(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = sample_cross_sections(&mut rng, &mesh);
        let at = |x: f64, y: f64| mesh.nearest_cell(x, y);
        let inner = at(0.5, 0.5);
        assert!((5.0..7.0).contains(&xs.mu_t[inner]));
        assert!((2.0..4.0).contains(&xs.mu_s[inner]));
        let outer = at(0.1, 0.1);
        assert_eq!(xs.mu_t[outer], 10.0);
        assert_eq!(xs.mu_s[outer], 5.0);
        for (t, s) in xs.mu_t.iter().zip(&xs.mu_s) {
            assert!(t - s >= 0.0);
        }
    }

    #[test]
    fn beam_specs_respect_inflow_and_sigma_ranges() {
        let mesh = SpatialMesh::unit(40);
        let quad = build_quadrature_set();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let specs = sample_beam_specs(&mut rng, &mesh, &quad, (0.005, 0.02), (0.005, 0.01));
            for spec in &specs {
                assert!(spec.edge.is_inflow(&quad.directions[spec.dir_index]));
                assert!((0.00707..0.02829).contains(&spec.sigma_r), "{}", spec.sigma_r);
                assert!((0.00707..0.01415).contains(&spec.sigma_v), "{}", spec.sigma_v);
            }
            let left = specs[0];
            assert!(quad.directions[left.dir_index].c > 0.0);
        }
    }

    #[test]
    fn beam_centers_are_uniform_over_edge_cells() {
        let mesh = SpatialMesh::unit(40);
        let quad = build_quadrature_set();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; 40];
        let draws = 10_000;
        for _ in 0..draws {
            let specs = sample_beam_specs(&mut rng, &mesh, &quad, (0.005, 0.02), (0.005, 0.01));
            let cell = ((specs[0].center - 0.5 * mesh.dy) / mesh.dy).round() as usize;
            counts[cell] += 1;
        }
        let expected = draws as f64 / 40.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Critical value of chi-squared with 39 dof at p = 0.01.
        assert!(chi2 < 62.428, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn delta_bc_peak_and_support() {
        let mesh = SpatialMesh::unit(40);
        let quad = build_quadrature_set();
        // Beams centered exactly on boundary samples.
        let specs = [
            BeamSpec { edge: Edge::Left, center: mesh.centers[0].1, dir_index: 0, sigma_r: 0.01, sigma_v: 0.0075 },
            BeamSpec { edge: Edge::Right, center: 0.5125, dir_index: 6, sigma_r: 0.01, sigma_v: 0.0075 },
            BeamSpec { edge: Edge::Bottom, center: 0.2125, dir_index: 1, sigma_r: 0.01, sigma_v: 0.0075 },
            BeamSpec { edge: Edge::Top, center: 0.7125, dir_index: 13, sigma_r: 0.01, sigma_v: 0.0075 },
        ];
        let bc = build_delta_bc(&specs, &mesh, &quad, BC_SUPPORT_CUTOFF).unwrap();
        let peak_1d_r = 1.0 / (0.01 * std::f64::consts::PI.sqrt());
        let peak_1d_v = 1.0 / (0.0075 * std::f64::consts::PI.sqrt());
        let expected_peak = peak_1d_r * peak_1d_v * peak_1d_v;
        assert_relative_eq!(peak_1d_v, 75.2253, epsilon = 1e-4);
        let max = bc.values.iter().cloned().fold(0.0, f64::max);
        assert_relative_eq!(max, expected_peak, max_relative = 1e-10);
        // Far samples are exactly zero after the support cutoff.
        let far = bc
            .coords
            .iter()
            .zip(&bc.values)
            .filter(|((x, y, _), _)| *x == 0.0 && (y - specs[0].center).abs() > 0.3)
            .map(|(_, v)| *v)
            .fold(0.0f64, f64::max);
        assert_eq!(far, 0.0);
    }

    #[test]
    fn delta_bc_mass_factorizes() {
        let mesh = SpatialMesh::unit(40);
        let quad = build_quadrature_set();
        let specs = [
            BeamSpec { edge: Edge::Left, center: 0.4875, dir_index: 0, sigma_r: 0.02, sigma_v: 0.012 },
            BeamSpec { edge: Edge::Right, center: 0.5125, dir_index: 6, sigma_r: 0.02, sigma_v: 0.012 },
            BeamSpec { edge: Edge::Bottom, center: 0.2125, dir_index: 1, sigma_r: 0.02, sigma_v: 0.012 },
            BeamSpec { edge: Edge::Top, center: 0.7125, dir_index: 13, sigma_r: 0.02, sigma_v: 0.012 },
        ];
        let bc = build_delta_bc(&specs, &mesh, &quad, 0.0).unwrap();
        // Discrete beam mass on the left edge factorizes into the spatial and
        // angular 1D quadratures.
        let spec = specs[0];
        let beam_dir = quad.directions[spec.dir_index];
        let mut mass = 0.0;
        for (i, &(x, _y, _k)) in bc.coords.iter().enumerate() {
            if x == 0.0 {
                mass += bc.values[i] * bc.weights[i];
            }
        }
        let spatial: f64 = (0..mesh.ny)
            .map(|c| {
                let y = (c as f64 + 0.5) * mesh.dy;
                mesh.dy * mollified_delta(y, spec.center, spec.sigma_r)
            })
            .sum();
        let angular: f64 = (0..quad.len())
            .filter(|&k| Edge::Left.is_inflow(&quad.directions[k]))
            .map(|k| {
                quad.weights[k]
                    * mollified_delta(quad.directions[k].c, beam_dir.c, spec.sigma_v)
                    * mollified_delta(quad.directions[k].s, beam_dir.s, spec.sigma_v)
            })
            .sum();
        assert!((mass - spatial * angular).abs() < 1e-6 * mass.max(1.0), "{mass} vs {}", spatial * angular);
    }

    #[test]
    fn case_bcs_match_their_formulas() {
        let mesh = SpatialMesh::unit(10);
        let quad = build_quadrature_set();
        let bc = build_case_bc(&BcSpec::CaseI, &mesh, &quad).unwrap();
        for (i, &(x, _, _)) in bc.coords.iter().enumerate() {
            if x == 0.0 {
                assert_eq!(bc.values[i], 1.0);
            } else {
                assert_eq!(bc.values[i], 0.0);
            }
        }
        // Case II with zero amplitude is the constant 5.
        let bc = build_case_bc(&BcSpec::CaseII([(0.0, 3.0); 4]), &mesh, &quad).unwrap();
        assert!(bc.values.iter().all(|&v| v == 5.0));
        // Case III with zero amplitudes is 5 * 1 * 1.
        let bc = build_case_bc(&BcSpec::CaseIII([(0.0, 1.0, 0.0, 1.0); 4]), &mesh, &quad).unwrap();
        assert!(bc.values.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn grf_source_properties() {
        let mesh = SpatialMesh::unit(32);
        let quad = build_quadrature_set();
        let spectrum = GrfSpectrum::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = grf_source(&mut rng, &mesh, &quad, &spectrum);
        assert!(a.iter().all(|&v| v >= 0.0));
        // Angular replication.
        for ix in 0..4 {
            for k in 1..quad.len() {
                assert_eq!(a[(ix, 5, k)], a[(ix, 5, 0)]);
            }
        }
        // Zero amplitude gives the constant offset.
        let flat = grf_source(
            &mut ChaCha8Rng::seed_from_u64(11),
            &mesh,
            &quad,
            &GrfSpectrum { amplitude: 0.0, ..spectrum },
        );
        assert!(flat.iter().all(|&v| v == spectrum.offset));
        // Different seeds decorrelate.
        let b = grf_source(&mut ChaCha8Rng::seed_from_u64(12), &mesh, &quad, &spectrum);
        let av: Vec<f64> = (0..mesh.nx * mesh.ny)
            .map(|c| a[(c / mesh.ny, c % mesh.ny, 0)])
            .collect();
        let bv: Vec<f64> = (0..mesh.nx * mesh.ny)
            .map(|c| b[(c / mesh.ny, c % mesh.ny, 0)])
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&av), mean(&bv));
        let cov: f64 =
            av.iter().zip(&bv).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / av.len() as f64;
        let sa = (av.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / av.len() as f64).sqrt();
        let sb = (bv.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / bv.len() as f64).sqrt();
        let rho = cov / (sa * sb);
        assert!(rho.abs() < 0.2, "correlation {rho}");
    }

    #[test]
    fn normalization_round_trip() {
        let cfg = DatasetConfig {
            nx: 8,
            ny: 8,
            num_train: 2,
            num_val: 1,
            kind: DatasetKind::Delta,
            seed: 5,
            ..DatasetConfig::default()
        };
        let dataset = generate_dataset(&cfg).unwrap();
        assert!(dataset.normalized);
        // Normalization constants come from the training split, so its labels
        // land exactly in [0, 1]; validation labels may poke slightly out.
        for s in dataset.train() {
            assert!(s.intensity.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
        for s in dataset.validation() {
            assert!(s.intensity.iter().all(|v| v.is_finite()));
        }
        // Affine example: range [2, 10], value 6 -> 0.5.
        let mut sample = dataset.samples[0].clone();
        sample.normalized = false;
        sample.intensity = vec![2.0, 6.0, 10.0];
        sample.boundary = vec![1.0];
        normalize_sample(&mut sample, 2.0, 10.0).unwrap();
        assert_eq!(sample.intensity, vec![0.0, 0.5, 1.0]);
        denormalize_sample(&mut sample);
        for (v, expect) in sample.intensity.iter().zip([2.0, 6.0, 10.0]) {
            assert_relative_eq!(*v, expect, max_relative = 1e-15);
        }
        // Degenerate range is rejected.
        assert!(normalize_sample(&mut sample, 3.0, 3.0).is_err());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let cfg = DatasetConfig {
            nx: 6,
            ny: 6,
            num_train: 2,
            num_val: 1,
            seed: 42,
            ..DatasetConfig::default()
        };
        let d1 = generate_dataset(&cfg).unwrap();
        let d2 = generate_dataset(&cfg).unwrap();
        for (a, b) in d1.samples.iter().zip(&d2.samples) {
            assert_eq!(a.intensity, b.intensity);
            assert_eq!(a.boundary, b.boundary);
        }

        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d1).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.num_train, 2);
        assert_eq!(back.i_min.to_bits(), d1.i_min.to_bits());
        for (a, b) in d1.samples.iter().zip(&back.samples) {
            assert_eq!(
                a.intensity.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.intensity.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(a.gen, b.gen);
        }

        // Write-read-write produces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &back).unwrap();
        let m1 = std::fs::read(dir.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn rebuild_at_same_resolution_is_identical() {
        let cfg = DatasetConfig {
            nx: 10,
            ny: 10,
            num_train: 1,
            num_val: 0,
            seed: 9,
            solver_tol: 1e-10,
            ..DatasetConfig::default()
        };
        let dataset = generate_dataset(&cfg).unwrap();
        let sample = &dataset.samples[0];
        let rebuilt = rebuild_sample_at_resolution(sample, 10, 10, 1e-10, 1000).unwrap();
        assert_eq!(sample.boundary, rebuilt.boundary);
        assert_eq!(sample.intensity, rebuilt.intensity);
        let coarse = rebuild_sample_at_resolution(sample, 5, 5, 1e-10, 1000).unwrap();
        assert_eq!(coarse.position_coords.nrows(), 25);
        assert_eq!(coarse.boundary.len(), 4 * 5 * 12);
    }

    #[test]
    fn lifting_dataset_uses_interior_source() {
        let cfg = DatasetConfig {
            nx: 6,
            ny: 6,
            num_train: 1,
            num_val: 0,
            kind: DatasetKind::AblationL,
            seed: 3,
            ..DatasetConfig::default()
        };
        let dataset = generate_dataset(&cfg).unwrap();
        let s = &dataset.samples[0];
        assert_eq!(s.boundary.len(), 6 * 6 * 24);
        assert!(s.boundary.iter().any(|&v| v > 0.0));
        // Interior integration weights: cell area times angular weight.
        let total: f64 = s.boundary_weights.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-10);
    }

    #[test]
    fn ablation_j_has_single_channel_mu_and_no_kernel() {
        let cfg = DatasetConfig {
            nx: 6,
            ny: 6,
            num_train: 1,
            num_val: 0,
            kind: DatasetKind::AblationJ,
            seed: 4,
            ..DatasetConfig::default()
        };
        let dataset = generate_dataset(&cfg).unwrap();
        let s = &dataset.samples[0];
        assert_eq!(s.mu.ncols(), 1);
        assert_eq!(s.scattering_kernel.dim(), (0, 0));
    }
}
