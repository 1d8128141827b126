//! `nerfinv`: dataset generation, pretraining, inversion, fine-tuning,
//! animation, evaluation and ablations from one JSON config.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};
use commands::{Ctx, InputSource, InvertArgs};
use config::RunConfig;
use error::CliError;
use nerfinv_core::pipeline::{Sweep, Variant};
use nerfinv_core::LatentMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "nerfinv",
    version,
    about = "Single-image inversion and geometry-regularized fine-tuning of a latent radiance-field generator",
    after_long_help = config::help_text(),
)]
struct Cli {
    /// JSON run config; defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic training set into <run>/data.
    MakeData,
    /// Train the identity embedder and pretrain the generator (g_o.ckpt).
    Pretrain,
    /// Optimize the pivot latent for one input image (z_init.json, recon.png).
    Invert {
        /// Input PNG; without it a held-out identity is rendered.
        #[arg(long, conflicts_with = "heldout")]
        image: Option<PathBuf>,
        /// Foreground mask PNG for --image.
        #[arg(long, requires = "image")]
        mask: Option<PathBuf>,
        /// Held-out identity index.
        #[arg(long)]
        heldout: Option<usize>,
        /// Camera pose as "yaw,pitch" in radians.
        #[arg(long, value_parser = commands::parse_pair)]
        pose: Option<(f64, f64)>,
        /// Expression as "e1,e2".
        #[arg(long, value_parser = commands::parse_pair)]
        expr: Option<(f64, f64)>,
        #[arg(long, default_value = "W", value_parser = parse_mode)]
        mode: LatentMode,
        /// Steps per inversion stage (overrides inversion.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the generator around the pivot (g_f.ckpt, losses.csv).
    Finetune {
        /// Objective variant: L_img, +L_imp, +L_exp or full.
        #[arg(long, default_value = "full", value_parser = parse_variant)]
        ablation: Variant,
    },
    /// Render a pose or expression sweep (novel/*.png, grid.png).
    Animate {
        #[arg(long, default_value = "yaw", value_parser = parse_sweep)]
        sweep: Sweep,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Render the original generator instead of the fine-tuned one.
        #[arg(long)]
        original: bool,
    },
    /// Score the fine-tuned generator against ground truth (metrics.json).
    Evaluate,
    /// Fine-tune several variants over held-out identities and seeds (ablation.csv).
    Ablate {
        /// Comma-separated variants (default: ablation.variants).
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Option<Vec<Variant>>,
        /// Comma-separated seeds (default: ablation.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Held-out identities (default: ablation.identities).
        #[arg(long)]
        identities: Option<usize>,
    },
}

fn parse_mode(s: &str) -> Result<LatentMode, String> {
    s.parse().map_err(|e: nerfinv_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: nerfinv_core::Error| e.to_string())
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    s.parse().map_err(|e: nerfinv_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx::new(cfg)?;
    match cli.command {
        Command::MakeData => commands::make_data(&ctx),
        Command::Pretrain => commands::pretrain_cmd(&ctx),
        Command::Invert {
            image,
            mask,
            heldout,
            pose,
            expr,
            mode,
            steps,
        } => {
            let source = match image {
                Some(path) => InputSource::Image { path, mask },
                None => InputSource::HeldOut(heldout.unwrap_or(0)),
            };
            commands::invert_cmd(
                &ctx,
                &InvertArgs {
                    source,
                    pose,
                    expr,
                    mode,
                    steps,
                },
            )
        }
        Command::Finetune { ablation } => commands::finetune_cmd(&ctx, ablation),
        Command::Animate { sweep, frames, original } => {
            commands::animate_cmd(&ctx, sweep, frames, if original { commands::G_O } else { commands::G_F })
        }
        Command::Evaluate => commands::evaluate_cmd(&ctx),
        Command::Ablate {
            variants,
            seeds,
            identities,
        } => {
            let variants = match variants {
                Some(v) => v,
                None => ctx
                    .cfg
                    .ablation
                    .variants
                    .iter()
                    .map(|s| s.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e: nerfinv_core::Error| CliError::Config(e.to_string()))?,
            };
            let seeds = seeds.unwrap_or_else(|| ctx.cfg.ablation.seeds.clone());
            let identities = identities.unwrap_or(ctx.cfg.ablation.identities);
            commands::ablate_cmd(&ctx, &variants, &seeds, identities)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.to_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
