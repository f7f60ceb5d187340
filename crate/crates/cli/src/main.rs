use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use objctx::analysis::DEFAULT_EPSILON;
use objctx::network::Variant;
use objctx::retrieval::Mode;
use objctx_cli::commands;
use objctx_cli::config::Split;
use objctx_cli::runs::ContextSource;
use objctx_cli::{CliResult, RunConfig};

/// Find missing or out-of-place objects from their context.
///
/// Exit codes: 1 config, 2 io, 3 version mismatch, 4 runtime.
#[derive(Parser)]
#[command(name = "objctx", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "objctx.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetKind {
    Base,
    Sfc,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config preset.
    InitConfig {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        force: bool,
    },
    /// Render the synthetic train and test splits.
    GenerateData,
    /// Train a network on the training split.
    Train {
        #[arg(long, value_enum)]
        variant: NetKind,
        /// Add mined hard negatives between epochs (fully-convolutional only).
        #[arg(long)]
        mine: bool,
        #[arg(long)]
        name: String,
    },
    /// Context heat map of one image.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regions with strong context and no detection.
    FindMissing(FindArgs),
    /// Detections with weak context.
    FindOutOfContext(FindArgs),
    /// Recall@k of a run against its ground truth.
    Evaluate {
        #[arg(long)]
        run: String,
        #[arg(long, default_value_t = 500)]
        max_k: usize,
    },
    /// Per-pixel sensitivity map and mean logit distance of a model.
    Sensitivity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// HTTP backend for the review gallery.
    ServeGallery {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(clap::Args)]
struct FindArgs {
    /// `prior`, `random`, or a checkpoint path (without extension).
    #[arg(long)]
    context: String,
    #[arg(long)]
    run: String,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

fn context_source(arg: &str) -> ContextSource {
    match arg {
        "prior" => ContextSource::Prior,
        "random" => ContextSource::Random,
        path => ContextSource::Model {
            checkpoint: path.to_string(),
        },
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Command::InitConfig { preset, force } = &cli.command {
        return commands::init_config(preset, &cli.config, *force);
    }
    let cfg = RunConfig::load(&cli.config)?;
    match cli.command {
        Command::InitConfig { .. } => unreachable!(),
        Command::GenerateData => commands::generate_data(&cfg),
        Command::Train {
            variant,
            mine,
            name,
        } => {
            let variant = match variant {
                NetKind::Base => Variant::Base,
                NetKind::Sfc => Variant::FullyConvolutional,
            };
            for r in commands::train_model(&cfg, variant, mine, &name)? {
                println!(
                    "epoch {:>3}  train {:.4}  val {:.4}  acc {:.3}  mined {}{}",
                    r.epoch,
                    r.train_loss,
                    r.validation.loss,
                    r.validation.accuracy,
                    r.mined,
                    if r.improved { "  *" } else { "" }
                );
            }
            Ok(())
        }
        Command::Heatmap { model, image, out } => commands::heatmap(&cfg, &model, &image, &out),
        Command::FindMissing(a) => find(&cfg, Mode::Missing, a),
        Command::FindOutOfContext(a) => find(&cfg, Mode::OutOfContext, a),
        Command::Evaluate { run, max_k } => {
            for (k, r) in commands::evaluate(&cfg, &run, max_k)? {
                println!("{k}\t{r:.4}");
            }
            Ok(())
        }
        Command::Sensitivity {
            model,
            samples,
            pairs,
            epsilon,
            step,
            out,
        } => {
            let rep = commands::sensitivity(&cfg, &model, samples, pairs, epsilon, step, &out)?;
            println!("center_surround_ratio\t{:.4}", rep.center_surround);
            println!("mean_distance_loss\t{:.4}", rep.mean_distance);
            Ok(())
        }
        Command::ServeGallery { addr } => {
            objctx_cli::server::serve(cfg.paths.run_dir.clone(), &addr)
        }
    }
}

fn find(cfg: &RunConfig, mode: Mode, a: FindArgs) -> CliResult<()> {
    let run = commands::find(cfg, mode, context_source(&a.context), a.split, &a.run)?;
    println!("{}", run.path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
