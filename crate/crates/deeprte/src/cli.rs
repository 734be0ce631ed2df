//! Command implementations behind the thin `rte` binary: dataset generation,
//! solving, training, evaluation, prediction and verification, all
//! config-driven and reproducible.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::container::Container;
use crate::dataset::{
    self, build_case_bc, BcSpec, CaseKind, DatasetKind, Regime,
};
use crate::error::RteError;
use crate::geometry::{build_quadrature_set, build_scattering_kernel, Domain2D, SpatialMesh};
use crate::model::{count_params, predict_intensity};
use crate::solver::{density, sweep_solve};
use crate::training::{
    self, cross_resolution_eval, error_decomposition_experiment, evaluate, load_checkpoint,
    save_checkpoint, verify_linearity, write_history_csv, EpochRecord, Metrics,
};

fn ensure_dir(path: &Path) -> Result<(), RteError> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), RteError> {
    ensure_dir(out)?;
    std::fs::write(out.join("config.toml"), cfg.echo_toml())?;
    Ok(())
}

/// `gen-data`: generates a dataset container.
pub fn cmd_gen_data(
    cfg: &RunConfig,
    ablation: Option<&str>,
    case: Option<&str>,
    linearity: bool,
    out: &Path,
) -> Result<(), RteError> {
    let mut dcfg = cfg.dataset.clone();
    dcfg.seed = cfg.seed;
    if let Some(tag) = ablation {
        match tag {
            "J" | "j" => dcfg.kind = DatasetKind::AblationJ,
            "L" | "l" => dcfg.kind = DatasetKind::AblationL,
            "no-scatter" => {
                dcfg.kind = DatasetKind::Delta;
                dcfg.regime = Regime::Range(0.0, 0.9);
            }
            other => return Err(RteError::Config(format!("unknown ablation '{other}'"))),
        }
    }
    if let Some(case) = case {
        dcfg.kind = DatasetKind::Case(CaseKind::parse(case)?);
    }
    if linearity {
        dcfg.kind = DatasetKind::LinearityDelta { solve: true };
    }
    let mut cfg_echo = cfg.clone();
    cfg_echo.dataset = dcfg.clone();
    echo_config(&cfg_echo, out)?;

    println!(
        "generating {} samples ({} train / {} val) at {}x{}x24, kind {:?}, regime {} ...",
        dcfg.num_train + dcfg.num_val,
        dcfg.num_train,
        dcfg.num_val,
        dcfg.nx,
        dcfg.ny,
        dcfg.kind,
        dcfg.regime.name()
    );
    let ds = dataset::generate_dataset(&dcfg)?;
    dataset::write_dataset(out, &ds)?;
    println!(
        "wrote {} samples to {} (intensity range [{:.6e}, {:.6e}], seed {})",
        ds.samples.len(),
        out.display(),
        ds.i_min,
        ds.i_max,
        ds.seed
    );
    Ok(())
}

/// `solve`: one deterministic sweep solve under the given boundary spec.
pub fn cmd_solve(cfg: &RunConfig, case: Option<&str>, out: &Path) -> Result<(), RteError> {
    echo_config(cfg, out)?;
    let mesh = SpatialMesh::new(Domain2D::unit(), cfg.dataset.nx, cfg.dataset.ny)?;
    let quad = build_quadrature_set();
    let mut rng = dataset::sample_rng(cfg.seed, 0, 0);
    let g = match cfg.dataset.regime {
        Regime::Fixed(g) => g,
        regime => {
            use rand::Rng;
            let (a, b) = regime.g_range();
            if a == b {
                a
            } else {
                rng.gen_range(a..b)
            }
        }
    };
    let kernel = build_scattering_kernel(g, &quad, false)?;
    use rand::Rng;
    let xs = dataset::cross_sections_two_level(
        &mesh,
        rng.gen_range(5.0..7.0),
        rng.gen_range(2.0..4.0),
    );
    let bc_spec = match case {
        Some(c) => match CaseKind::parse(c)? {
            CaseKind::I => BcSpec::CaseI,
            CaseKind::II => dataset::draw_case_ii(&mut rng),
            CaseKind::III => dataset::draw_case_iii(&mut rng),
            CaseKind::Ood99 => BcSpec::OodG99,
        },
        None => BcSpec::Delta(dataset::sample_beam_specs(
            &mut rng,
            &mesh,
            &quad,
            cfg.dataset.sigma_r_range,
            cfg.dataset.sigma_v_range,
        )),
    };
    let bc = build_case_bc(&bc_spec, &mesh, &quad)?;
    println!(
        "solving {}x{}x{} with g = {:.4} ...",
        mesh.nx,
        mesh.ny,
        quad.len(),
        g
    );
    let (flux, report) = sweep_solve(
        &xs,
        &kernel,
        &quad,
        &bc,
        &mesh,
        cfg.dataset.solver_tol,
        cfg.dataset.solver_max_iter,
        None,
    )?;
    println!(
        "iterations {}, final residual {:.3e}, converged {}",
        report.iterations, report.final_residual, report.converged
    );

    let phi = density(&flux, &quad);
    let mut c = Container::new("fields");
    c.insert(
        "intensity",
        vec![mesh.nx, mesh.ny, quad.len()],
        flux.values.iter().copied().collect(),
    );
    c.insert("density", vec![mesh.nx, mesh.ny], phi);
    c.meta_json("iterations", serde_json::json!(report.iterations));
    c.meta_json("final_residual", serde_json::json!(report.final_residual));
    c.meta_json("converged", serde_json::json!(report.converged));
    c.meta_json("g", serde_json::json!(g));
    c.write(out)?;

    if !report.converged {
        return Err(RteError::NotConverged {
            iterations: report.iterations,
            residual: report.final_residual,
        });
    }
    Ok(())
}

/// `train`: minibatch Adam over a dataset container, with checkpoints, loss
/// history and a final validation evaluation.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: bool,
) -> Result<(), RteError> {
    echo_config(cfg, out)?;
    let ds = dataset::read_dataset(data)?;
    println!(
        "training on {} samples ({} validation held out), {} epochs, batch {}, {} collocation points",
        ds.num_train,
        ds.samples.len() - ds.num_train,
        cfg.train.epochs,
        cfg.train.batch,
        cfg.train.n_col
    );

    let start = if resume {
        let ckpt_dir = out.join("checkpoint-last");
        let (params, opt, _, history) = load_checkpoint(&ckpt_dir)?;
        let opt = opt.ok_or_else(|| {
            RteError::Training("resume checkpoint lacks optimizer state".into())
        })?;
        println!("resuming from {} at step {}", ckpt_dir.display(), opt.step);
        Some((params, opt, history))
    } else {
        None
    };

    let t0 = std::time::Instant::now();
    let norm = (ds.i_min, ds.i_max);
    let ckpt_every = cfg.train.checkpoint_every;
    let out_buf = out.to_path_buf();
    let model_cfg = cfg.model.clone();
    let result = training::train(&ds, &cfg.model, &cfg.train, start, |record, params, opt| {
        if record.epoch % 25 == 0 || record.epoch + 1 == cfg.train.epochs {
            println!(
                "epoch {:>5}  loss {:.6e}  lr {:.3e}  [{:.0}s]",
                record.epoch,
                record.mean_loss,
                record.lr,
                t0.elapsed().as_secs_f64()
            );
        }
        if ckpt_every > 0 && (record.epoch + 1) % ckpt_every == 0 {
            save_checkpoint_with_norm(
                &out_buf.join("checkpoint-last"),
                params,
                Some(opt),
                &model_cfg,
                &[],
                norm,
            )?;
        }
        if !record.mean_loss.is_finite() {
            save_checkpoint_with_norm(
                &out_buf.join("checkpoint-diagnostic"),
                params,
                Some(opt),
                &model_cfg,
                &[],
                norm,
            )?;
            return Err(RteError::Training(format!(
                "non-finite loss at epoch {}; diagnostic checkpoint written",
                record.epoch
            )));
        }
        Ok(true)
    })?;

    save_checkpoint_with_norm(
        &out.join("checkpoint-final"),
        &result.params,
        Some(&result.opt),
        &cfg.model,
        &result.history,
        norm,
    )?;
    write_history_csv(&out.join("loss_history.csv"), &result.history)?;
    println!(
        "finished {} epochs in {:.0}s; final loss {:.6e}",
        result.history.len(),
        t0.elapsed().as_secs_f64(),
        result.history.last().map_or(f64::NAN, |r| r.mean_loss)
    );

    if !ds.validation().is_empty() {
        let metrics = evaluate(ds.validation(), &result.params, &cfg.model)?;
        print_metrics("validation", &cfg.model, &metrics);
        write_metrics_csv(&out.join("metrics.csv"), &[("validation".into(), metrics)])?;
    }
    Ok(())
}

/// Checkpoint save with the dataset normalization constants recorded.
pub fn save_checkpoint_with_norm(
    path: &Path,
    params: &crate::autodiff::ParamStore,
    opt: Option<&training::OptimState>,
    model_cfg: &crate::model::ModelConfig,
    history: &[EpochRecord],
    norm: (f64, f64),
) -> Result<(), RteError> {
    save_checkpoint(path, params, opt, model_cfg, history)?;
    // Append the constants to the manifest.
    let mut c = Container::read(path)?;
    c.meta_json("i_min", serde_json::json!(norm.0));
    c.meta_json("i_max", serde_json::json!(norm.1));
    c.write(path)
}

pub fn load_checkpoint_with_norm(
    path: &Path,
) -> Result<
    (
        crate::autodiff::ParamStore,
        Option<training::OptimState>,
        crate::model::ModelConfig,
        (f64, f64),
    ),
    RteError,
> {
    let (params, opt, cfg, _) = load_checkpoint(path)?;
    let c = Container::read(path)?;
    let norm = (
        c.get_meta_f64("i_min").unwrap_or(0.0),
        c.get_meta_f64("i_max").unwrap_or(1.0),
    );
    Ok((params, opt, cfg, norm))
}

/// `eval`: metrics of a checkpoint over a dataset split.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    out: &Path,
) -> Result<(), RteError> {
    echo_config(cfg, out)?;
    let (params, _, model_cfg, _) = load_checkpoint_with_norm(checkpoint)?;
    let ds = dataset::read_dataset(data)?;
    let samples = match split {
        "train" => ds.train(),
        "val" | "validation" => ds.validation(),
        "all" => &ds.samples,
        other => return Err(RteError::Config(format!("unknown split '{other}'"))),
    };
    if samples.is_empty() {
        return Err(RteError::Config(format!("split '{split}' is empty")));
    }
    let metrics = evaluate(samples, &params, &model_cfg)?;
    print_metrics(split, &model_cfg, &metrics);
    write_metrics_csv(&out.join("metrics.csv"), &[(split.to_string(), metrics)])?;
    Ok(())
}

/// `predict`: density/intensity fields for a generated boundary condition.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    case: &str,
    out: &Path,
) -> Result<(), RteError> {
    echo_config(cfg, out)?;
    let (params, _, model_cfg, norm) = load_checkpoint_with_norm(checkpoint)?;
    let mesh = SpatialMesh::new(Domain2D::unit(), cfg.dataset.nx, cfg.dataset.ny)?;
    let quad = build_quadrature_set();
    let mut rng = dataset::sample_rng(cfg.seed, 1, 0);
    let bc_spec = match CaseKind::parse(case)? {
        CaseKind::I => BcSpec::CaseI,
        CaseKind::II => dataset::draw_case_ii(&mut rng),
        CaseKind::III => dataset::draw_case_iii(&mut rng),
        CaseKind::Ood99 => BcSpec::OodG99,
    };
    use rand::Rng;
    let g = match cfg.dataset.regime {
        Regime::Fixed(g) => g,
        regime => {
            let (a, b) = regime.g_range();
            if a == b {
                a
            } else {
                rng.gen_range(a..b)
            }
        }
    };
    let kernel = build_scattering_kernel(g, &quad, false)?;
    let xs = dataset::cross_sections_two_level(&mesh, 6.0, 3.0);
    let bc = build_case_bc(&bc_spec, &mesh, &quad)?;

    // Normalized boundary in, normalized intensity out, then back to
    // physical scale.
    let scale = 1.0 / (norm.1 - norm.0);
    let mut inputs = crate::training::bc_inputs_for(&mesh, &quad, &xs, &kernel, &bc);
    for v in inputs.bc_values.iter_mut() {
        *v *= scale;
    }
    let nq = quad.len();
    let mut queries = Vec::with_capacity(mesh.n_cells() * nq);
    for &(x, y) in &mesh.centers {
        for k in 0..nq {
            queries.push((x, y, k));
        }
    }
    println!("predicting case {case} on {}x{}x{nq} with g = {g:.4} ...", mesh.nx, mesh.ny);
    let preds = predict_intensity(&inputs, &params, &model_cfg, &queries)?;
    let preds = dataset::denormalize_values(&preds, norm.0, norm.1);

    let mut phi = vec![0.0; mesh.n_cells()];
    for cell in 0..mesh.n_cells() {
        for k in 0..nq {
            phi[cell] += quad.weights[k] * preds[cell * nq + k];
        }
    }
    let mut c = Container::new("fields");
    c.insert("intensity", vec![mesh.nx, mesh.ny, nq], preds);
    c.insert("density", vec![mesh.nx, mesh.ny], phi);
    c.meta_json("g", serde_json::json!(g));
    c.meta_str("case", case);
    c.write(out)?;
    println!("wrote predicted fields to {}", out.display());
    Ok(())
}

/// `verify`: linearity, error-decomposition and cross-resolution reports.
pub fn cmd_verify(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    resolutions: &[usize],
    out: &Path,
) -> Result<(), RteError> {
    echo_config(cfg, out)?;
    let (params, _, model_cfg, _) = load_checkpoint_with_norm(checkpoint)?;
    let mut report = String::new();

    // Linearity over a shared-coefficient beam set; structural, so labels
    // are not needed.
    let lin_ds = dataset::generate_dataset(&dataset::DatasetConfig {
        nx: cfg.dataset.nx,
        ny: cfg.dataset.ny,
        num_train: 12,
        num_val: 0,
        kind: DatasetKind::LinearityDelta { solve: false },
        seed: cfg.seed ^ 0x11AA,
        ..cfg.dataset.clone()
    })?;
    let mut rng = dataset::sample_rng(cfg.seed, 2, 0);
    let lin = verify_linearity(&lin_ds.samples, &params, &model_cfg, &mut rng, 20, 64)?;
    report.push_str(&format!(
        "linearity: additivity mse {:.3e} (max rel {:.3e}), homogeneity mse {:.3e} (max rel {:.3e}) over {} pairs\n",
        lin.additivity_mse, lin.additivity_max_rel, lin.homogeneity_mse, lin.homogeneity_max_rel, lin.pairs
    ));

    // Error decomposition at the configured resolution.
    let decomp = error_decomposition_experiment(
        &params,
        &model_cfg,
        cfg.dataset.nx,
        mesh_sigma_r(cfg.dataset.nx),
        cfg.dataset.solver_tol,
        cfg.dataset.solver_max_iter,
    )?;
    report.push_str(&format!(
        "error decomposition: bc approx {:.3e}, nn residual {:.3e}, solver residual {:.3e}, weighted bound term {:.3e}, bound {:.3e}, direct {:.3e}, direct <= bound: {}\n",
        decomp.bc_approx_error,
        decomp.nn_residual,
        decomp.solver_residual,
        decomp.weighted_generalization,
        decomp.bound,
        decomp.direct_error,
        decomp.direct_error <= decomp.bound
    ));

    // Cross-resolution over validation samples, when a dataset is given.
    if let Some(data) = data {
        let ds = dataset::read_dataset(data)?;
        let samples = if ds.validation().is_empty() { ds.train() } else { ds.validation() };
        let take = samples.len().min(8);
        let rows = cross_resolution_eval(
            &samples[..take],
            &params,
            &model_cfg,
            resolutions,
            cfg.dataset.solver_tol,
            cfg.dataset.solver_max_iter,
        )?;
        let mut csv = String::from("resolution,mse_density,rmspe_density\n");
        for (res, m) in &rows {
            report.push_str(&format!(
                "cross-resolution {res}x{res}: density mse {:.3e}, rmspe {:.3}%\n",
                m.mse_density, m.rmspe_density
            ));
            csv.push_str(&format!("{res},{:.6e},{:.6e}\n", m.mse_density, m.rmspe_density));
        }
        std::fs::write(out.join("cross_resolution.csv"), csv)?;
    }

    print!("{report}");
    std::fs::write(out.join("verify_report.txt"), report)?;
    Ok(())
}

/// Beam width for the error-decomposition experiment, balanced against the
/// grid spacing.
pub fn mesh_sigma_r(n: usize) -> f64 {
    1.0 / n as f64
}

fn print_metrics(tag: &str, model_cfg: &crate::model::ModelConfig, m: &Metrics) {
    println!("model parameters: {}", count_params(model_cfg));
    println!(
        "{tag}: intensity mse {:.4e} | density mse {:.4e} | rmspe {:.3}% (pooled {:.3}%) over {} samples",
        m.mse_intensity,
        m.mse_density,
        m.rmspe_density,
        m.rmspe_pooled,
        m.per_sample.len()
    );
}

fn write_metrics_csv(path: &PathBuf, rows: &[(String, Metrics)]) -> Result<(), RteError> {
    let mut csv = String::from("split,mse_intensity,mse_density,rmspe_density,rmspe_pooled,samples\n");
    for (tag, m) in rows {
        csv.push_str(&format!(
            "{tag},{:.9e},{:.9e},{:.6e},{:.6e},{}\n",
            m.mse_intensity,
            m.mse_density,
            m.rmspe_density,
            m.rmspe_pooled,
            m.per_sample.len()
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// Builds the thread pool from `--threads`, `RTE_THREADS`, or all cores.
pub fn init_threads(threads: usize) -> Result<(), RteError> {
    let n = if threads > 0 {
        threads
    } else {
        std::env::var("RTE_THREADS").ok().and_then(|s| s.parse().ok()).unwrap_or(0)
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RteError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}
