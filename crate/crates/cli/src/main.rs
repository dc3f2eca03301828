//! `flaresim` command-line tool.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, Kind};

#[derive(Debug, Parser)]
#[command(
    name = "flaresim",
    version,
    about = "Scatter-flare synthesis and flare-removal evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Base seed; per-item streams are derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optics.kernel_size=17`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads, 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugKind {
    Flare,
    Background,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a seeded coefficient field and write PSF grid, basis and heatmaps.
    GenPsf {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build augmented, scatter-rendered (input, gt) pairs.
    Synthesize {
        #[arg(long)]
        flare_dir: PathBuf,
        #[arg(long)]
        bg_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Apply the flare or background augmentation pipeline.
    Augment {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum, default_value_t = AugKind::Flare)]
        kind: AugKind,
    },
    /// Composite flares onto backgrounds, pairing files in name order.
    Composite {
        #[arg(long)]
        flare_dir: PathBuf,
        #[arg(long)]
        bg_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        glare_masks: Option<PathBuf>,
        #[arg(long)]
        streak_masks: Option<PathBuf>,
        /// Precomputed perceptual scores (LPIPS), `{"name.png": score}`.
        #[arg(long)]
        lpips: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the restoration network on one image.
    Forward {
        #[arg(long)]
        input: PathBuf,
        /// Weight manifest directory; seeded weights from the config otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a seeded random weight manifest.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        /// Zero every learned parameter instead.
        #[arg(long)]
        zero: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Kind::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.global.config.as_deref(), &cli.global.overrides)
        .map_err(|m| CliError::msg(Kind::Config, m))?;
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
            .map_err(|e| CliError::new(Kind::Internal, e))?;
    }
    let ctx = commands::Context {
        cfg,
        seed: cli.global.seed,
        verbose: cli.global.verbose,
    };
    match cli.command {
        Command::GenPsf { out } => commands::gen_psf(&ctx, &out),
        Command::Synthesize {
            flare_dir,
            bg_dir,
            out,
            count,
        } => commands::synthesize(&ctx, &flare_dir, &bg_dir, &out, count),
        Command::Augment {
            input_dir,
            out,
            count,
            kind,
        } => commands::augment(&ctx, &input_dir, &out, count, kind),
        Command::Composite {
            flare_dir,
            bg_dir,
            out,
        } => commands::composite(&ctx, &flare_dir, &bg_dir, &out),
        Command::Eval {
            pred_dir,
            gt_dir,
            glare_masks,
            streak_masks,
            lpips,
            report,
        } => commands::eval(
            &ctx,
            &commands::EvalInputs {
                pred_dir,
                gt_dir,
                glare_masks,
                streak_masks,
                lpips,
            },
            &report,
        ),
        Command::Forward {
            input,
            weights,
            output,
        } => commands::forward(&ctx, &input, weights.as_deref(), &output),
        Command::InitWeights { out, zero } => commands::init_weights(&ctx, &out, zero),
    }
}
