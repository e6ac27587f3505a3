//! `cceplus`: run the weakly supervised pipeline stage by stage from a config file.
//!
//! Standard output carries tab-separated machine-readable records; human summaries and
//! logs go to standard error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cceplus::config::ExperimentConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cceplus", version, about = "Cluster-class cross-entropy training on weakly labeled bags")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the sweep.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Force {
    /// Accept artifacts produced under a different config hash.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the bag manifest.
    GenBags,
    /// Train the VAE on the training pool.
    TrainVae {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
    /// Fit K-means on VAE latents and cache every instance's cluster-class.
    FitClusters {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
    /// Train the classifier on the bag manifest.
    TrainCnn {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Cluster-class cache (required under cce_plus).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
    /// Accuracy, confusion matrix and ROC on the test set.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// One-vs-rest class for the ROC.
        #[arg(long, default_value_t = 1)]
        positive_class: usize,
        #[command(flatten)]
        force: Force,
    },
    /// Accuracy for every bag size × method cell.
    Sweep {
        /// Add the alpha = 0 cell.
        #[arg(long)]
        alpha_zero: bool,
        #[arg(long, value_delimiter = ',')]
        bag_sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        cluster_counts: Option<Vec<usize>>,
        /// Leave out the CCE row.
        #[arg(long)]
        no_cce: bool,
        /// Reuse a trained VAE instead of training one.
        #[arg(long)]
        vae: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
    /// Write posterior-mean latents as CSV.
    ExportLatents {
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Attach weak labels from this manifest and export only its instances.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
    /// Render sample bags as a PNG contact sheet.
    RenderBags {
        #[arg(long, default_value_t = 9)]
        bag_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,3,8,2,0")]
        labels: Vec<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.apply_env();
            c
        }
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let ctx = commands::Context::new(cfg);
    match cli.command {
        Command::GenBags => ctx.gen_bags(),
        Command::TrainVae { resume, force } => ctx.train_vae(resume, force.force),
        Command::FitClusters { vae, manifest, force } => ctx.fit_clusters(vae, manifest, force.force),
        Command::TrainCnn {
            manifest,
            labels,
            resume,
            force,
        } => ctx.train_cnn(manifest, labels, resume, force.force),
        Command::Evaluate {
            checkpoint,
            positive_class,
            force,
        } => ctx.evaluate(checkpoint, positive_class, force.force),
        Command::Sweep {
            alpha_zero,
            bag_sizes,
            cluster_counts,
            no_cce,
            vae,
            force,
        } => ctx.sweep(
            commands::SweepArgs {
                alpha_zero,
                bag_sizes,
                cluster_counts,
                no_cce,
                vae,
                jobs: cli.jobs,
            },
            force.force,
        ),
        Command::ExportLatents { vae, manifest, force } => ctx.export_latents(vae, manifest, force.force),
        Command::RenderBags { bag_size, labels } => ctx.render_bags(bag_size, &labels),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
