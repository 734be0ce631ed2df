//! The neural Green's-function operator: an optical-depth attention network
//! along characteristics, an attenuation MLP producing latent Green vectors,
//! residual scattering blocks implementing the truncated source-iteration
//! series, and the boundary integral that turns Green values into intensity
//! predictions. Includes the attenuation-only, lifting and no-scatter
//! ablation variants.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD};
use rayon::prelude::*;

use crate::autodiff::{self, lookup, Init, ParamSpec, ParamStore, Tape, Var};
use crate::error::RteError;
use crate::geometry::relative_position_encoding;
use crate::geometry::Direction;

/// Which architecture variant to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Attenuation + scattering, boundary-integral prediction.
    Full,
    /// Attenuation only, single-channel cross section, no scattering blocks.
    AttenuationOnly,
    /// Attenuation only with a wider MLP; prediction integrates an interior
    /// source over the phase domain instead of the inflow boundary.
    Lifting,
    /// Scattering blocks keep their size but drop the angular quadrature
    /// contraction (plain per-direction MLP blocks).
    NoScatter,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::AttenuationOnly => "attenuation-only",
            Variant::Lifting => "lifting",
            Variant::NoScatter => "no-scatter",
        }
    }

    pub fn parse(s: &str) -> Result<Self, RteError> {
        match s {
            "full" => Ok(Variant::Full),
            "attenuation-only" | "J" | "j" => Ok(Variant::AttenuationOnly),
            "lifting" | "L" | "l" => Ok(Variant::Lifting),
            "no-scatter" => Ok(Variant::NoScatter),
            other => Err(RteError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Network hyperparameters. Defaults mirror the trained configuration; the
/// ablation constructors adjust exactly the fields их experiments change.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Total linear layers in the attenuation MLP (hidden tanh layers plus
    /// the output projection).
    pub n_mlp: usize,
    pub d_mlp: usize,
    /// Latent dimension of the truncated Green representation.
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Optical-depth feature width (one channel per cross-section kind).
    pub d_tau: usize,
    /// Number of scattering blocks (the last one folds into the query
    /// direction; zero disables the scattering module).
    pub n_blocks: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            n_mlp: 4,
            d_mlp: 128,
            d_model: 16,
            n_heads: 2,
            d_k: 32,
            d_v: 32,
            d_tau: 2,
            n_blocks: 2,
            variant: Variant::Full,
        }
    }

    /// Attenuation-only ablation: no scattering blocks, single-channel mu.
    pub fn attenuation_only() -> Self {
        Self { n_blocks: 0, variant: Variant::AttenuationOnly, ..Self::full() }
    }

    /// Lifting ablation: wider MLP, no scattering blocks, interior-source
    /// integration.
    pub fn lifting() -> Self {
        Self { d_mlp: 256, n_blocks: 0, variant: Variant::Lifting, ..Self::full() }
    }

    /// Scattering-disabled control: block sizes unchanged, quadrature
    /// contraction replaced by identity.
    pub fn no_scatter() -> Self {
        Self { variant: Variant::NoScatter, ..Self::full() }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn micro() -> Self {
        Self {
            n_mlp: 2,
            d_mlp: 8,
            d_model: 4,
            n_heads: 1,
            d_k: 3,
            d_v: 3,
            d_tau: 2,
            n_blocks: 2,
            variant: Variant::Full,
        }
    }

    /// Columns of the cross-section feature (`mu_t` alone for the
    /// attenuation-only variant, `(mu_t, mu_s)` otherwise).
    pub fn mu_dim(&self) -> usize {
        match self.variant {
            Variant::AttenuationOnly => 1,
            _ => 2,
        }
    }

    /// Width of the assembled attenuation-MLP input
    /// `(r, Omega, r', Omega', exp(-tau))`.
    pub fn mlp_input_dim(&self) -> usize {
        8 + self.d_tau
    }

    /// Every parameter tensor of this configuration, in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for h in 0..self.n_heads {
            specs.push(ParamSpec::new(
                format!("optical_depth/head{h}/q/weight"),
                vec![4, self.d_k],
                Init::GlorotUniform,
            ));
            specs.push(ParamSpec::new(
                format!("optical_depth/head{h}/q/bias"),
                vec![self.d_k],
                Init::Zeros,
            ));
            specs.push(ParamSpec::new(
                format!("optical_depth/head{h}/k/weight"),
                vec![2, self.d_k],
                Init::GlorotUniform,
            ));
            specs.push(ParamSpec::new(
                format!("optical_depth/head{h}/k/bias"),
                vec![self.d_k],
                Init::Zeros,
            ));
            specs.push(ParamSpec::new(
                format!("optical_depth/head{h}/v/weight"),
                vec![self.mu_dim(), self.d_v],
                Init::GlorotUniform,
            ));
            specs.push(ParamSpec::new(
                format!("optical_depth/head{h}/v/bias"),
                vec![self.d_v],
                Init::Zeros,
            ));
        }
        specs.push(ParamSpec::new(
            "optical_depth/out/weight",
            vec![self.n_heads * self.d_v, self.d_tau],
            Init::GlorotUniform,
        ));
        specs.push(ParamSpec::new("optical_depth/out/bias", vec![self.d_tau], Init::Zeros));

        for l in 0..self.n_mlp {
            let in_dim = if l == 0 { self.mlp_input_dim() } else { self.d_mlp };
            let out_dim = if l == self.n_mlp - 1 { self.d_model } else { self.d_mlp };
            specs.push(ParamSpec::new(
                format!("attenuation/mlp/{l}/weight"),
                vec![in_dim, out_dim],
                Init::GlorotUniform,
            ));
            specs.push(ParamSpec::new(
                format!("attenuation/mlp/{l}/bias"),
                vec![out_dim],
                Init::Zeros,
            ));
        }

        for b in 0..self.n_blocks {
            specs.push(ParamSpec::new(
                format!("scattering/block{b}/weight"),
                vec![self.d_model, self.d_model],
                Init::GlorotUniform,
            ));
            specs.push(ParamSpec::new(
                format!("scattering/block{b}/bias"),
                vec![self.d_model],
                Init::Zeros,
            ));
            specs.push(ParamSpec::new(
                format!("scattering/block{b}/ln/gamma"),
                vec![self.d_model],
                Init::Ones,
            ));
            specs.push(ParamSpec::new(
                format!("scattering/block{b}/ln/beta"),
                vec![self.d_model],
                Init::Zeros,
            ));
        }

        specs.push(ParamSpec::new("green/weight", vec![self.d_model, 1], Init::GlorotUniform));
        specs
    }

    pub fn init_params(&self, rng: &mut impl rand::Rng) -> ParamStore {
        autodiff::init_params(&self.param_specs(), rng)
    }
}

/// Exact parameter count of a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    cfg.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Everything the operator needs about one problem instance. Boundary
/// entries with value exactly zero contribute nothing to the integral and
/// are skipped by the batched path.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// `[M, 2]` mesh point coordinates the cross sections live on.
    pub mesh_coords: Array2<f64>,
    /// `[M, mu_dim]` cross-section values at the mesh points.
    pub mu: Array2<f64>,
    /// `[Nq, 2]` direction cosines `(c, s)` of the quadrature.
    pub quad_dirs: Array2<f64>,
    /// `[Nq]` quadrature weights.
    pub quad_weights: Vec<f64>,
    /// `[Nq, Nq]` scattering kernel on quadrature pairs.
    pub kernel: Array2<f64>,
    /// `[B, 4]` integration phase coordinates (inflow boundary, or interior
    /// phase points for the lifting variant).
    pub bc_coords: Array2<f64>,
    /// `[B]` integration weights.
    pub bc_weights: Vec<f64>,
    /// `[B]` boundary (or source) values the prediction is linear in.
    pub bc_values: Vec<f64>,
}

impl ModelInputs {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), RteError> {
        let m = self.mesh_coords.nrows();
        let nq = self.quad_dirs.nrows();
        let b = self.bc_coords.nrows();
        if self.mu.nrows() != m || self.mu.ncols() != cfg.mu_dim() {
            return Err(RteError::Shape(format!(
                "mu is {:?}, expected [{m}, {}]",
                self.mu.dim(),
                cfg.mu_dim()
            )));
        }
        if self.quad_weights.len() != nq || self.kernel.dim() != (nq, nq) {
            return Err(RteError::Shape("quadrature arrays disagree".into()));
        }
        if self.bc_weights.len() != b || self.bc_values.len() != b {
            return Err(RteError::Shape("boundary arrays disagree".into()));
        }
        Ok(())
    }
}

/// One forward pass over a set of query positions, recorded on a tape.
pub struct GreenBatch {
    pub tape: Tape,
    pub vars: BTreeMap<String, Var>,
    /// Green values, rows `(u, b_kept, k)`, single column.
    pub greens: Var,
    /// Intensity predictions, rows `(u, k)`, single column.
    pub preds: Var,
    /// Indices of the boundary entries that were kept (nonzero values).
    pub kept_bc: Vec<usize>,
    pub n_quad: usize,
}

/// Runs the batched forward pass for all quadrature directions at each query
/// position. Query directions must coincide with the quadrature set (grid
/// phase points); [`green_function`] handles arbitrary directions.
pub fn forward_batch(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &ModelInputs,
    positions: &[(f64, f64)],
) -> Result<GreenBatch, RteError> {
    // Boundary entries that can contribute to the integral.
    let kept_bc: Vec<usize> =
        (0..inputs.bc_values.len()).filter(|&b| inputs.bc_values[b] != 0.0).collect();
    forward_batch_with_kept(params, cfg, inputs, positions, kept_bc)
}

/// [`forward_batch`] with an explicit set of contributing boundary entries.
pub fn forward_batch_with_kept(
    params: &ParamStore,
    cfg: &ModelConfig,
    inputs: &ModelInputs,
    positions: &[(f64, f64)],
    kept_bc: Vec<usize>,
) -> Result<GreenBatch, RteError> {
    inputs.validate(cfg)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let bc_coords = gather_rows_plain(&inputs.bc_coords, &kept_bc);
    let exptau = optical_depth_features(&mut tape, &vars, cfg, inputs, positions)?;
    let phase = phase_matrix(inputs, positions);
    let nq = inputs.quad_dirs.nrows();

    let mlp_in = tape.assemble_green_input(phase, bc_coords, exptau, nq);
    let latents = autodiff::mlp(&mut tape, mlp_in, &vars, "attenuation/mlp", cfg.n_mlp)?;

    let final_latents = scattering_stack(&mut tape, &vars, cfg, inputs, latents)?;
    let greens = {
        let w = lookup(&vars, "green/weight")?;
        tape.matmul(final_latents, w)
    };

    let bw: Vec<f64> =
        kept_bc.iter().map(|&b| inputs.bc_values[b] * inputs.bc_weights[b]).collect();
    let preds = if kept_bc.is_empty() {
        // Zero boundary: predictions are exactly zero.
        tape.constant(ArrayD::zeros(ndarray::IxDyn(&[positions.len() * nq, 1])))
    } else {
        tape.boundary_integrate(greens, bw, nq)
    };

    Ok(GreenBatch { tape, vars, greens, preds, kept_bc, n_quad: nq })
}

/// Attention along characteristics: one query row per (position, quadrature
/// direction) pair, producing `exp(-tau)` features of width `d_tau`.
fn optical_depth_features(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    inputs: &ModelInputs,
    positions: &[(f64, f64)],
) -> Result<Var, RteError> {
    let m = inputs.mesh_coords.nrows();
    let nq = inputs.quad_dirs.nrows();
    let p_count = positions.len() * nq;

    let mut rpe = Array2::<f64>::zeros((p_count * m, 2));
    let mut mask = Array2::<f64>::zeros((p_count, m));
    for (u, &(x, y)) in positions.iter().enumerate() {
        for j in 0..nq {
            let d = Direction {
                zeta: 0.0,
                theta: 0.0,
                c: inputs.quad_dirs[(j, 0)],
                s: inputs.quad_dirs[(j, 1)],
            };
            let p = u * nq + j;
            for i in 0..m {
                let (r_local, theta_local, mval) = relative_position_encoding(
                    (x, y),
                    &d,
                    (inputs.mesh_coords[(i, 0)], inputs.mesh_coords[(i, 1)]),
                );
                rpe[(p * m + i, 0)] = r_local;
                rpe[(p * m + i, 1)] = theta_local;
                mask[(p, i)] = mval;
            }
        }
    }

    let phase = tape.constant2(phase_matrix(inputs, positions));
    let rpe = tape.constant2(rpe);
    let mu = tape.constant2(inputs.mu.clone());
    let scale = 1.0 / (cfg.d_k as f64).sqrt();

    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let wq = lookup(vars, &format!("optical_depth/head{h}/q/weight"))?;
        let bq = lookup(vars, &format!("optical_depth/head{h}/q/bias"))?;
        let wk = lookup(vars, &format!("optical_depth/head{h}/k/weight"))?;
        let bk = lookup(vars, &format!("optical_depth/head{h}/k/bias"))?;
        let wv = lookup(vars, &format!("optical_depth/head{h}/v/weight"))?;
        let bv = lookup(vars, &format!("optical_depth/head{h}/v/bias"))?;
        let q = autodiff::linear(tape, phase, wq, Some(bq));
        let k = autodiff::linear(tape, rpe, wk, Some(bk));
        let v = autodiff::linear(tape, mu, wv, Some(bv));
        let scores = tape.rows_dot_grouped(k, q, m, scale);
        let attn = tape.masked_softmax_rows(scores, mask.clone())?;
        heads.push(tape.matmul(attn, v));
    }
    let concat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    let w_out = lookup(vars, "optical_depth/out/weight")?;
    let b_out = lookup(vars, "optical_depth/out/bias")?;
    let tau = autodiff::linear(tape, concat, w_out, Some(b_out));
    Ok(tape.exp_neg(tau))
}

/// Residual scattering stack over latent rows `(u, b, j)`.
fn scattering_stack(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    inputs: &ModelInputs,
    latents: Var,
) -> Result<Var, RteError> {
    if cfg.n_blocks == 0 {
        return Ok(latents);
    }
    let nq = inputs.quad_dirs.nrows();
    // Weighted kernel: row i holds w_j p(Omega_i, Omega_j). Query directions
    // coincide with the quadrature here, so the same matrix serves both the
    // inner expansion and the final fold onto the query direction.
    let mut s_mix = Array2::<f64>::zeros((nq, nq));
    for i in 0..nq {
        for j in 0..nq {
            s_mix[(i, j)] = inputs.quad_weights[j] * inputs.kernel[(i, j)];
        }
    }

    let mut current = latents;
    for b in 0..cfg.n_blocks {
        let mixed = match cfg.variant {
            Variant::NoScatter => current,
            _ => tape.group_matmul(current, s_mix.clone()),
        };
        let blk = scattering_block_body(tape, vars, b, mixed)?;
        // Every block adds back the attenuation output (the series' first
        // term); the final block folds onto the query-direction latent, which
        // is that same initial tensor.
        current = tape.add(latents, blk);
    }
    Ok(current)
}

fn scattering_block_body(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    index: usize,
    mixed: Var,
) -> Result<Var, RteError> {
    let w = lookup(vars, &format!("scattering/block{index}/weight"))?;
    let b = lookup(vars, &format!("scattering/block{index}/bias"))?;
    let gamma = lookup(vars, &format!("scattering/block{index}/ln/gamma"))?;
    let beta = lookup(vars, &format!("scattering/block{index}/ln/beta"))?;
    let lin = autodiff::linear(tape, mixed, w, Some(b));
    let act = tape.tanh(lin);
    Ok(tape.layer_norm_rows(act, gamma, beta))
}

fn phase_matrix(inputs: &ModelInputs, positions: &[(f64, f64)]) -> Array2<f64> {
    let nq = inputs.quad_dirs.nrows();
    let mut phase = Array2::<f64>::zeros((positions.len() * nq, 4));
    for (u, &(x, y)) in positions.iter().enumerate() {
        for j in 0..nq {
            phase[(u * nq + j, 0)] = x;
            phase[(u * nq + j, 1)] = y;
            phase[(u * nq + j, 2)] = inputs.quad_dirs[(j, 0)];
            phase[(u * nq + j, 3)] = inputs.quad_dirs[(j, 1)];
        }
    }
    phase
}

fn gather_rows_plain(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), src.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&src.row(i));
    }
    out
}

/// Predicted intensity at phase queries `(x, y, dir_index)`:
/// `I(r, Omega_k) = sum_b G(r, Omega_k, r'_b, Omega'_b) I_-(b) w_b`,
/// batched and chunked over unique query positions.
pub fn predict_intensity(
    inputs: &ModelInputs,
    params: &ParamStore,
    cfg: &ModelConfig,
    queries: &[(f64, f64, usize)],
) -> Result<Vec<f64>, RteError> {
    inputs.validate(cfg)?;
    let nq = inputs.quad_dirs.nrows();
    for &(_, _, k) in queries {
        if k >= nq {
            return Err(RteError::Shape(format!("query direction index {k} out of range")));
        }
    }

    // Group queries by exact position, preserving first-seen order.
    let mut positions: Vec<(f64, f64)> = Vec::new();
    let mut pos_index: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut query_slots = Vec::with_capacity(queries.len());
    for &(x, y, k) in queries {
        let key = (x.to_bits(), y.to_bits());
        let u = *pos_index.entry(key).or_insert_with(|| {
            positions.push((x, y));
            positions.len() - 1
        });
        query_slots.push((u, k));
    }

    // Chunk positions so one tape stays cache- and memory-friendly.
    let nnz = inputs.bc_values.iter().filter(|&&v| v != 0.0).count().max(1);
    let chunk_positions = (40_000 / (nnz * nq)).clamp(1, 64);
    let chunks: Vec<(usize, Vec<(f64, f64)>)> = positions
        .chunks(chunk_positions)
        .enumerate()
        .map(|(i, c)| (i * chunk_positions, c.to_vec()))
        .collect();

    let results: Result<Vec<(usize, Vec<f64>)>, RteError> = chunks
        .par_iter()
        .map(|(offset, chunk)| {
            let batch = forward_batch(params, cfg, inputs, chunk)?;
            let preds = batch.tape.value2(batch.preds).column(0).to_vec();
            Ok((*offset, preds))
        })
        .collect();

    let mut all_preds = vec![0.0; positions.len() * nq];
    for (offset, preds) in results? {
        let start = offset * nq;
        all_preds[start..start + preds.len()].copy_from_slice(&preds);
    }
    Ok(query_slots.iter().map(|&(u, k)| all_preds[u * nq + k]).collect())
}

/// Predicted intensities for several boundary-value vectors sharing the same
/// coefficient fields and boundary coordinates: the Green values are
/// evaluated once and contracted against every value set. Queries run over
/// the full `positions x quadrature` grid; the result is indexed
/// `[value_set][u * nq + k]`.
pub fn predict_intensity_multi(
    inputs: &ModelInputs,
    params: &ParamStore,
    cfg: &ModelConfig,
    positions: &[(f64, f64)],
    value_sets: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, RteError> {
    inputs.validate(cfg)?;
    let nq = inputs.quad_dirs.nrows();
    let n_bc = inputs.bc_values.len();
    for values in value_sets {
        if values.len() != n_bc {
            return Err(RteError::Shape("value set length differs from boundary".into()));
        }
    }
    let kept: Vec<usize> =
        (0..n_bc).filter(|&b| value_sets.iter().any(|v| v[b] != 0.0)).collect();
    let weighted: Vec<Vec<f64>> = value_sets
        .iter()
        .map(|v| kept.iter().map(|&b| v[b] * inputs.bc_weights[b]).collect())
        .collect();

    let chunk_positions = (40_000 / (kept.len().max(1) * nq)).clamp(1, 64);
    let chunks: Vec<(usize, Vec<(f64, f64)>)> = positions
        .chunks(chunk_positions)
        .enumerate()
        .map(|(i, c)| (i * chunk_positions, c.to_vec()))
        .collect();

    let results: Result<Vec<(usize, Vec<Vec<f64>>)>, RteError> = chunks
        .par_iter()
        .map(|(offset, chunk)| {
            let batch =
                forward_batch_with_kept(params, cfg, inputs, chunk, kept.clone())?;
            let greens = batch.tape.value2(batch.greens);
            let b_count = kept.len();
            let mut preds = vec![vec![0.0; chunk.len() * nq]; value_sets.len()];
            for (v, w) in weighted.iter().enumerate() {
                for u in 0..chunk.len() {
                    for (bk, &wv) in w.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        for k in 0..nq {
                            preds[v][u * nq + k] +=
                                greens[((u * b_count + bk) * nq + k, 0)] * wv;
                        }
                    }
                }
            }
            Ok((*offset, preds))
        })
        .collect();

    let mut out = vec![vec![0.0; positions.len() * nq]; value_sets.len()];
    for (offset, preds) in results? {
        for (v, chunk_preds) in preds.into_iter().enumerate() {
            out[v][offset * nq..offset * nq + chunk_preds.len()].copy_from_slice(&chunk_preds);
        }
    }
    Ok(out)
}

/// Latent Green representation along a characteristic (length `d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGreen(pub Vec<f64>);

/// One Green evaluation request: a query phase point, a boundary phase point,
/// the coefficient mesh, and the kernel rows and weights the scattering
/// module consumes.
#[derive(Debug, Clone)]
pub struct GreenEvalRequest {
    pub r: (f64, f64),
    pub omega: (f64, f64),
    pub r_prime: (f64, f64),
    pub omega_prime: (f64, f64),
    /// `[M, 2]` mesh coordinates.
    pub mesh_coords: Array2<f64>,
    /// `[M, mu_dim]` cross sections at the mesh points.
    pub mu: Array2<f64>,
    /// `[Nq, 2]` quadrature direction cosines.
    pub quad_dirs: Array2<f64>,
    pub quad_weights: Vec<f64>,
    /// `p(Omega, Omega*_i)` for the query direction.
    pub kernel_query_row: Vec<f64>,
    /// `[Nq, Nq]` kernel on quadrature pairs.
    pub kernel_quad: Array2<f64>,
}

impl GreenEvalRequest {
    fn validate(&self, cfg: &ModelConfig) -> Result<(), RteError> {
        let nq = self.quad_dirs.nrows();
        if self.kernel_query_row.len() != nq
            || self.kernel_quad.dim() != (nq, nq)
            || self.quad_weights.len() != nq
        {
            return Err(RteError::Shape("kernel rows do not match the quadrature".into()));
        }
        if self.mu.ncols() != cfg.mu_dim() || self.mu.nrows() != self.mesh_coords.nrows() {
            return Err(RteError::Shape("mu shape does not match mesh/config".into()));
        }
        Ok(())
    }
}

/// Learned optical-depth surrogate at one phase point: masked multi-head
/// attention over mesh points, returning `tau` of width `d_tau`.
pub fn optical_depth_net(
    r: (f64, f64),
    omega: (f64, f64),
    mesh_coords: &Array2<f64>,
    mu: &Array2<f64>,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Vec<f64>, RteError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let tau = odn_on_tape(&mut tape, &vars, cfg, r, omega, mesh_coords, mu)?;
    Ok(tape.value(tau).iter().copied().collect())
}

fn odn_on_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    r: (f64, f64),
    omega: (f64, f64),
    mesh_coords: &Array2<f64>,
    mu: &Array2<f64>,
) -> Result<Var, RteError> {
    let m = mesh_coords.nrows();
    let d = Direction { zeta: 0.0, theta: 0.0, c: omega.0, s: omega.1 };
    let mut rpe = Array2::<f64>::zeros((m, 2));
    let mut mask = Array2::<f64>::zeros((1, m));
    for i in 0..m {
        let (r_local, theta_local, mval) =
            relative_position_encoding(r, &d, (mesh_coords[(i, 0)], mesh_coords[(i, 1)]));
        rpe[(i, 0)] = r_local;
        rpe[(i, 1)] = theta_local;
        mask[(0, i)] = mval;
    }
    let phase = tape.constant2(ndarray::arr2(&[[r.0, r.1, omega.0, omega.1]]));
    let rpe = tape.constant2(rpe);
    let mu_v = tape.constant2(mu.clone());
    let scale = 1.0 / (cfg.d_k as f64).sqrt();
    let mut heads = Vec::new();
    for h in 0..cfg.n_heads {
        let q = autodiff::linear(
            tape,
            phase,
            lookup(vars, &format!("optical_depth/head{h}/q/weight"))?,
            Some(lookup(vars, &format!("optical_depth/head{h}/q/bias"))?),
        );
        let k = autodiff::linear(
            tape,
            rpe,
            lookup(vars, &format!("optical_depth/head{h}/k/weight"))?,
            Some(lookup(vars, &format!("optical_depth/head{h}/k/bias"))?),
        );
        let v = autodiff::linear(
            tape,
            mu_v,
            lookup(vars, &format!("optical_depth/head{h}/v/weight"))?,
            Some(lookup(vars, &format!("optical_depth/head{h}/v/bias"))?),
        );
        let scores = tape.rows_dot_grouped(k, q, m, scale);
        let attn = tape.masked_softmax_rows(scores, mask.clone())?;
        heads.push(tape.matmul(attn, v));
    }
    let concat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    Ok(autodiff::linear(
        tape,
        concat,
        lookup(vars, "optical_depth/out/weight")?,
        Some(lookup(vars, "optical_depth/out/bias")?),
    ))
}

/// Attenuation module at one (query, boundary) phase pair: optical-depth
/// attention, then the MLP over `(r, Omega, r', Omega', exp(-tau))`.
#[allow(clippy::too_many_arguments)]
pub fn attenuation_module(
    r: (f64, f64),
    omega: (f64, f64),
    r_prime: (f64, f64),
    omega_prime: (f64, f64),
    mesh_coords: &Array2<f64>,
    mu: &Array2<f64>,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<LatentGreen, RteError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let latent = attenuation_on_tape(
        &mut tape,
        &vars,
        cfg,
        r,
        omega,
        r_prime,
        omega_prime,
        mesh_coords,
        mu,
    )?;
    Ok(LatentGreen(tape.value(latent).iter().copied().collect()))
}

#[allow(clippy::too_many_arguments)]
fn attenuation_on_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    r: (f64, f64),
    omega: (f64, f64),
    r_prime: (f64, f64),
    omega_prime: (f64, f64),
    mesh_coords: &Array2<f64>,
    mu: &Array2<f64>,
) -> Result<Var, RteError> {
    let tau = odn_on_tape(tape, vars, cfg, r, omega, mesh_coords, mu)?;
    let exptau = tape.exp_neg(tau);
    let coords = tape.constant2(ndarray::arr2(&[[
        r.0,
        r.1,
        omega.0,
        omega.1,
        r_prime.0,
        r_prime.1,
        omega_prime.0,
        omega_prime.1,
    ]]));
    let z = tape.concat_cols(&[coords, exptau]);
    autodiff::mlp(tape, z, vars, "attenuation/mlp", cfg.n_mlp)
}

/// One scattering block over a list of latents: weighted angular sum against
/// the kernel row, linear + tanh, post layer normalization.
pub fn scattering_block(
    latents: &[LatentGreen],
    kernel_row: &[f64],
    weights: &[f64],
    block_index: usize,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<LatentGreen, RteError> {
    if latents.len() != kernel_row.len() || latents.len() != weights.len() {
        return Err(RteError::Shape("latents/kernel/weights lengths differ".into()));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let stacked = stack_latents(&mut tape, latents);
    let mixed = match cfg.variant {
        Variant::NoScatter => stacked,
        _ => {
            let mut s = Array2::<f64>::zeros((1, latents.len()));
            for j in 0..latents.len() {
                s[(0, j)] = weights[j] * kernel_row[j];
            }
            tape.group_matmul(stacked, s)
        }
    };
    let out = scattering_block_body(&mut tape, &vars, block_index, mixed)?;
    Ok(LatentGreen(tape.value2(out).row(0).to_vec()))
}

fn stack_latents(tape: &mut Tape, latents: &[LatentGreen]) -> Var {
    let d = latents[0].0.len();
    let mut m = Array2::<f64>::zeros((latents.len(), d));
    for (i, l) in latents.iter().enumerate() {
        m.row_mut(i).assign(&Array1::from_vec(l.0.clone()));
    }
    tape.constant2(m)
}

/// Scattering module: the inner residual expansion over quadrature latents
/// followed by the final fold onto the query-direction latent.
#[allow(clippy::too_many_arguments)]
pub fn scattering_module(
    g: &LatentGreen,
    g_stars: &[LatentGreen],
    kernel_query_row: &[f64],
    kernel_quad: &Array2<f64>,
    weights: &[f64],
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<LatentGreen, RteError> {
    if cfg.n_blocks == 0 {
        return Ok(g.clone());
    }
    let nq = g_stars.len();
    let init: Vec<LatentGreen> = g_stars.to_vec();
    let mut current = init.clone();
    for block in 0..cfg.n_blocks - 1 {
        let mut next = Vec::with_capacity(nq);
        for i in 0..nq {
            let row: Vec<f64> = match cfg.variant {
                // Identity pass-through keeps only the i-th latent.
                Variant::NoScatter => (0..nq).map(|j| if i == j { 1.0 } else { 0.0 }).collect(),
                _ => (0..nq).map(|j| kernel_quad[(i, j)]).collect(),
            };
            let ones = vec![1.0; nq];
            let (row_ref, w_ref): (&[f64], &[f64]) = match cfg.variant {
                Variant::NoScatter => (&row, &ones),
                _ => (&row, weights),
            };
            let blk = scattering_block(&current, row_ref, w_ref, block, params, cfg)?;
            let summed: Vec<f64> =
                init[i].0.iter().zip(&blk.0).map(|(a, b)| a + b).collect();
            next.push(LatentGreen(summed));
        }
        current = next;
    }
    let final_block = if matches!(cfg.variant, Variant::NoScatter) {
        // The identity fold uses the query latent itself.
        let row = vec![1.0];
        scattering_block(
            std::slice::from_ref(g),
            &row,
            &[1.0],
            cfg.n_blocks - 1,
            params,
            cfg,
        )?
    } else {
        scattering_block(&current, kernel_query_row, weights, cfg.n_blocks - 1, params, cfg)?
    };
    Ok(LatentGreen(g.0.iter().zip(&final_block.0).map(|(a, b)| a + b).collect()))
}

/// Scalar Green's function at one request: attenuation latents at the query
/// direction and at every quadrature direction, the scattering module, then
/// the bias-free projection. Only coordinates enter; the boundary value never
/// does.
pub fn green_function(
    req: &GreenEvalRequest,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<f64, RteError> {
    req.validate(cfg)?;
    let g = attenuation_module(
        req.r,
        req.omega,
        req.r_prime,
        req.omega_prime,
        &req.mesh_coords,
        &req.mu,
        params,
        cfg,
    )?;
    let nq = req.quad_dirs.nrows();
    let mut g_stars = Vec::with_capacity(nq);
    for j in 0..nq {
        g_stars.push(attenuation_module(
            req.r,
            (req.quad_dirs[(j, 0)], req.quad_dirs[(j, 1)]),
            req.r_prime,
            req.omega_prime,
            &req.mesh_coords,
            &req.mu,
            params,
            cfg,
        )?);
    }
    let folded = scattering_module(
        &g,
        &g_stars,
        &req.kernel_query_row,
        &req.kernel_quad,
        &req.quad_weights,
        params,
        cfg,
    )?;
    let w = params.get("green/weight")?;
    let w = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    Ok(folded.0.iter().enumerate().map(|(i, v)| v * w[(i, 0)]).sum())
}

/// Green's function of the lifting variant, evaluated against interior
/// source coordinates; the configuration must be the lifting variant.
pub fn lifting_variant_green(
    req: &GreenEvalRequest,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<f64, RteError> {
    if cfg.variant != Variant::Lifting {
        return Err(RteError::Model("lifting_variant_green needs the lifting variant".into()));
    }
    green_function(req, params, cfg)
}
