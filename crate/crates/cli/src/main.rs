//! `cbl`: generate synthetic corpora, train, evaluate and inspect models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use cbl_core::eval::ScoreSource;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "cbl",
    version,
    about = "Cyclic-bootstrap labeling on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset snapshot (overrides `dataset` in the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Ensemble,
    Basic,
    WetOnly,
    TeacherHead,
}

impl From<SourceArg> for ScoreSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Ensemble => ScoreSource::Ensemble,
            SourceArg::Basic => ScoreSource::Basic,
            SourceArg::WetOnly => ScoreSource::WetOnly,
            SourceArg::TeacherHead => ScoreSource::TeacherHead,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset snapshot.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file (default: the configured dataset path).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, history and summary to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// baseline, cbl, ema-last-oic, ema-cls, a-ema or w-ema.
        #[arg(long)]
        preset: Option<String>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and print the metrics summary as JSON.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        score_source: Option<SourceArg>,
        #[arg(long)]
        nms_thresh: Option<f64>,
        #[arg(long)]
        score_floor: Option<f64>,
        /// Also write summary.json/summary.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-scene rankings, positive sets and seeds as JSON.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: usize,
        /// Positive-set IoU threshold (default: schedule value at the checkpoint's iteration).
        #[arg(long)]
        tau: Option<f64>,
        /// Proposals listed per ranking.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

fn resolve(args: &ConfigArgs, preset: Option<&str>) -> Result<config::RunConfig, CliError> {
    let mut cfg = config::load(args.config.as_deref(), preset, &args.set)?;
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { cfg, out } => {
            let cfg = resolve(&cfg, None)?;
            commands::gen(&cfg, out)?;
        }
        Command::Train { cfg, preset, quiet } => {
            let cfg = resolve(&cfg, preset.as_deref())?;
            let summary = commands::train(&cfg, quiet)?;
            commands::print_json(&summary)?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            score_source,
            nms_thresh,
            score_floor,
            out,
        } => {
            let mut cfg = resolve(&cfg, None)?;
            if let Some(s) = score_source {
                cfg.eval.score_source = s.into();
            }
            if let Some(v) = nms_thresh {
                cfg.eval.nms_thresh = v;
            }
            if let Some(v) = score_floor {
                cfg.eval.score_floor = v;
            }
            cfg.validate()?;
            let summary = commands::eval(&cfg, &checkpoint, out.as_deref())?;
            commands::print_json(&summary)?;
        }
        Command::Inspect {
            cfg,
            checkpoint,
            scene,
            tau,
            top,
        } => {
            let cfg = resolve(&cfg, None)?;
            let dump = commands::inspect(&cfg, &checkpoint, scene, tau, top)?;
            commands::print_json(&dump)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
