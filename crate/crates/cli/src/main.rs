//! `qpdyn` command-line front end.
//!
//! Exit status: 0 on success, 1 when a run or its data fails, 2 for usage and
//! configuration errors (including anything clap rejects).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qpdyn::model::Position;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "qpdyn", version, about = "Quasiparticle dynamics: simulate, fit and analyse qubit coherence data")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SimProtocol {
    /// One T1 trace under CW illumination.
    T1,
    /// One Ramsey trace under CW illumination.
    Ramsey,
    /// Pulsed recovery series at one power.
    Recovery,
    /// Recovery series over the configured pulse lengths.
    Pulselen,
    /// CW power sweeps.
    Cw,
    /// e↔f Rabi traces with and without the g↔e π-pulse.
    EfRabi,
    /// Full pulsed + CW campaign.
    Campaign,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FitModel {
    Exponential,
    Ramsey,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic datasets.
    Simulate {
        #[arg(long, value_enum)]
        protocol: SimProtocol,
        /// Beam position; CW sweeps default to every configured position.
        #[arg(long)]
        position: Option<Position>,
        /// Optical power, W.
        #[arg(long)]
        power: Option<f64>,
        /// Pulse length, s (default from the drive block).
        #[arg(long)]
        pulse_len: Option<f64>,
    },
    /// Fit trace CSV files; directories are searched recursively.
    Fit {
        #[arg(long, value_enum)]
        model: FitModel,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Run the full analysis on a bundle directory or bundle.json.
    Pipeline {
        bundle: PathBuf,
        /// Recombination rates to scan, s⁻¹, comma separated; `0` alone
        /// gives the trapping-only analysis.
        #[arg(long, value_delimiter = ',')]
        r_grid: Option<Vec<f64>>,
        /// Fix the trapping rate instead of estimating it, kHz.
        #[arg(long)]
        fixed_s_khz: Option<f64>,
    },
    /// Raster-scan image of the configured scene and beam placement.
    Image {
        /// Remove the pad from the scene.
        #[arg(long)]
        no_pad: bool,
    },
    /// Re-render the figure tables from an existing report.json.
    Report { report: PathBuf },
}

/// Failure class, mapped onto the exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Resolved global options handed to every command.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult<()> {
    let cfg = load_config(&cli).map_err(Failure::Usage)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.into()))?;
    }
    let ctx = Ctx { out: cfg.out_dir.clone(), cfg };
    match cli.command {
        Command::Simulate { protocol, position, power, pulse_len } => {
            commands::simulate(&ctx, protocol, position, power, pulse_len)
        }
        Command::Fit { model, paths } => commands::fit(&ctx, model, &paths),
        Command::Pipeline { bundle, r_grid, fixed_s_khz } => commands::pipeline(&ctx, &bundle, r_grid, fixed_s_khz),
        Command::Image { no_pad } => commands::image(&ctx, no_pad),
        Command::Report { report } => commands::report(&ctx, &report),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
