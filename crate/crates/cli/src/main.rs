use anyhow::Result;
use clap::{Parser, Subcommand};
use lacuna_cli::config::{parse_config, ModelKind, Profile};
use lacuna_cli::pipeline::{self, Ctx, Space};
use lacuna_core::impute::ImputeMethod;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "lacuna",
    about = "Score-based diffusion on incomplete images: train, sample, impute, evaluate",
    version
)]
struct Cli {
    /// JSON experiment config; omitted = all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config profile.
    #[arg(long, global = true, value_enum)]
    profile: Option<CliProfile>,
    /// Override the output directory (also: env LACUNA_OUT).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum CliProfile {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum CliMethod {
    Replacement,
    GuidancePixel,
    GuidanceLatent,
    Em,
}

impl From<CliMethod> for ImputeMethod {
    fn from(m: CliMethod) -> Self {
        match m {
            CliMethod::Replacement => ImputeMethod::Replacement,
            CliMethod::GuidancePixel => ImputeMethod::GuidancePixel,
            CliMethod::GuidanceLatent => ImputeMethod::GuidanceLatent,
            CliMethod::Em => ImputeMethod::Em,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load MNIST and persist the MCAR masks for the whole grid.
    PrepareData,
    /// Train the VAE for one (missing-rate, seed) cell.
    TrainVae {
        #[arg(long)]
        missing_rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a score network (pixel: masked objective; latent: VAE latents).
    TrainScore {
        #[arg(long, value_enum)]
        space: Space,
        #[arg(long)]
        missing_rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// EM loop: replacement E-step + full-objective M-step retraining.
    TrainEm {
        #[arg(long)]
        missing_rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Draw unconditional samples from a trained cell.
    Sample {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        missing_rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Impute held-out test images at the configured test missing rate.
    Impute {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, value_enum)]
        method: CliMethod,
        #[arg(long)]
        missing_rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        count: Option<usize>,
    },
    /// FID/IS on samples and MSE on imputations for one cell.
    Evaluate {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        missing_rate: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the full (model x rate x seed) grid with resume.
    Sweep,
    /// Aggregate metrics.csv into per-figure CSVs.
    ExportPlots,
}

fn run() -> Result<()> {
    lacuna_nn::tune_allocator();
    let cli = Cli::parse();
    let mut cfg = parse_config(cli.config.as_deref())?;
    if let Some(p) = cli.profile {
        cfg.profile = match p {
            CliProfile::Paper => Profile::Paper,
            CliProfile::Desk => Profile::Desk,
        };
    }
    let mut resolved = cfg.resolve();
    if let Some(out) = cli.output {
        resolved.output_dir = out;
    }
    let ctx = Ctx::new(resolved);
    match cli.command {
        Command::PrepareData => pipeline::cmd_prepare_data(&ctx)?,
        Command::TrainVae { missing_rate, seed } => {
            pipeline::cmd_train_vae(&ctx, missing_rate, seed)?;
        }
        Command::TrainScore { space, missing_rate, seed } => {
            pipeline::cmd_train_score(&ctx, space, missing_rate, seed)?;
        }
        Command::TrainEm { missing_rate, seed } => {
            pipeline::cmd_train_em(&ctx, missing_rate, seed)?;
        }
        Command::Sample { model, missing_rate, seed, count } => {
            pipeline::cmd_sample(&ctx, model, missing_rate, seed, count)?;
        }
        Command::Impute { model, method, missing_rate, seed, count } => {
            pipeline::cmd_impute(&ctx, model, method.into(), missing_rate, seed, count)?;
        }
        Command::Evaluate { model, missing_rate, seed } => {
            pipeline::cmd_evaluate(&ctx, model, missing_rate, seed)?;
        }
        Command::Sweep => pipeline::cmd_sweep(&ctx)?,
        Command::ExportPlots => pipeline::cmd_export_plots(&ctx)?,
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        // single machine-parsable line on the final output line
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
