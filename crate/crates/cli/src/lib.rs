//! Config-driven command line for data generation, training, regime
//! comparison, few-shot sweeps and shift statistics.

pub mod commands;
pub mod config;
pub mod tables;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "nlt", version, about = "Neuron linear transformation for few-shot crowd counting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source and target train/val/test splits.
    Generate(Common),
    /// Train one regime and report target-test metrics.
    Train(Common),
    /// Run several regimes on shared data and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated regimes; overrides `regimes`.
        #[arg(long, value_delimiter = ',')]
        regimes: Option<Vec<String>>,
    },
    /// Shift statistics of a checkpoint with a shift bank.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Overrides `stats.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// NLT versus supervised training across few-shot ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ratios; overrides `ratios`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Compare { .. } => "compare",
            Command::Stats { .. } => "stats",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Generate(c) | Command::Train(c) => c,
            Command::Compare { common, .. }
            | Command::Stats { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

/// Resolves the configuration, runs the command and returns its summary.
pub fn run(cli: Cli) -> Result<String> {
    let common = cli.command.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Compare { regimes: Some(r), .. } => cfg.regimes = r.clone(),
        Command::Stats { checkpoint: Some(c), .. } => cfg.stats.checkpoint = Some(c.clone()),
        Command::Sweep { ratios: Some(r), .. } => cfg.ratios = r.clone(),
        _ => {}
    }
    cfg.validate()?;
    let out = cfg.resolve_out(common.out.as_deref(), cli.command.name());
    match cli.command {
        Command::Generate(_) => commands::cmd_generate(&cfg, &out),
        Command::Train(_) => commands::cmd_train(&cfg, &out),
        Command::Compare { .. } => commands::cmd_compare(&cfg, &out),
        Command::Stats { .. } => commands::cmd_stats(&cfg, &out),
        Command::Sweep { .. } => commands::cmd_sweep(&cfg, &out),
    }
}
