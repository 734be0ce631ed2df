//! Thin command-line front end: parses flags, merges them over a config
//! file, and dispatches to the library commands.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use deeprte::cli;
use deeprte::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "rte",
    about = "Discrete-ordinates transport solver and neural Green's-function operator"
)]
struct Args {
    /// Flat dotted-key TOML config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores; RTE_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Scattering regime: near-isotropy | moderate | forward-peaking | <g>.
    #[arg(long, global = true)]
    regime: Option<String>,
    /// Mesh cells per side.
    #[arg(long, global = true)]
    mesh: Option<usize>,
    /// Tiny sanity preset (model, dataset and schedule).
    #[arg(long, global = true)]
    micro: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset container (cross sections, beams, solver labels).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Ablation dataset: J (attenuation), L (lifting), no-scatter.
        #[arg(long)]
        ablation: Option<String>,
        /// Zero-shot case dataset: I, II, III, OOD.
        #[arg(long)]
        case: Option<String>,
        /// Fixed-coefficient beam dataset for linearity studies.
        #[arg(long)]
        linearity: bool,
        #[arg(long)]
        num_train: Option<usize>,
        #[arg(long)]
        num_val: Option<usize>,
    },
    /// Run one sweep solve and write intensity/density fields.
    Solve {
        #[arg(long)]
        out: PathBuf,
        /// Boundary condition: I, II, III, OOD (default: random beams).
        #[arg(long)]
        case: Option<String>,
    },
    /// Train the operator on a dataset container.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint-last`.
        #[arg(long)]
        resume: bool,
        /// Architecture variant: full, J, L, no-scatter.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict fields for a generated boundary condition.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Boundary condition: I, II, III, OOD.
        #[arg(long, default_value = "I")]
        case: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linearity, error-decomposition and cross-resolution reports.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Mesh resolutions for the cross-resolution table.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let args = Args::parse();

    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    if let Some(regime) = &args.regime {
        cfg.dataset.regime = deeprte::dataset::Regime::parse(regime)?;
    }
    if let Some(mesh) = args.mesh {
        cfg.dataset.nx = mesh;
        cfg.dataset.ny = mesh;
    }
    if args.micro {
        cfg.apply_micro_preset();
    }
    cli::init_threads(cfg.threads)?;

    match &args.command {
        Command::GenData { out, ablation, case, linearity, num_train, num_val } => {
            if let Some(n) = num_train {
                cfg.dataset.num_train = *n;
            }
            if let Some(n) = num_val {
                cfg.dataset.num_val = *n;
            }
            cli::cmd_gen_data(&cfg, ablation.as_deref(), case.as_deref(), *linearity, out)?;
        }
        Command::Solve { out, case } => cli::cmd_solve(&cfg, case.as_deref(), out)?,
        Command::Train { data, out, resume, ablation, epochs } => {
            if let Some(tag) = ablation {
                cfg.model.variant = deeprte::model::Variant::parse(tag)?;
                cfg.apply_variant_defaults();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            cli::cmd_train(&cfg, data, out, *resume)?;
        }
        Command::Eval { checkpoint, data, split, out } => {
            cli::cmd_eval(&cfg, checkpoint, data, split, out)?
        }
        Command::Predict { checkpoint, case, out } => {
            cli::cmd_predict(&cfg, checkpoint, case, out)?
        }
        Command::Verify { checkpoint, data, resolutions, out } => {
            let default_res = vec![cfg.dataset.nx, cfg.dataset.nx / 2, cfg.dataset.nx / 4];
            cli::cmd_verify(
                &cfg,
                checkpoint,
                data.as_deref(),
                resolutions.as_deref().unwrap_or(&default_res),
                out,
            )?;
        }
    }
    Ok(())
}
