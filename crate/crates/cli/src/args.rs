use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "drl", version, about = "Dynamic relevance learning experiments on synthetic episodes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config, or a manifest JSON from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; sweeps use `seed, seed+1, ...`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of seeds per variant.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, env = "DRL_OUT_DIR", default_value = "drl-out")]
    pub out: PathBuf,
    /// Override one config field, e.g. `--set relevance.depth=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Support shots per class (train.shots).
    #[arg(long)]
    pub shots: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Drl,
    Meta,
    Structure,
    Metric,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Drl => "drl",
            Axis::Meta => "meta",
            Axis::Structure => "structure",
            Axis::Metric => "metric",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Base training, fine-tuning and evaluation for one seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Compare variants along one axis over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Accuracy against GCN depth.
    DepthSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated depths.
        #[arg(long, default_value = "1,2,3,4,5,6")]
        depths: String,
    },
    /// Dynamic GCN against the group-loss iteration across shot counts.
    GroupCompare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated shot counts.
        #[arg(long = "shot-list", default_value = "1,2,3,5,10")]
        shot_list: String,
        /// Group-loss iterations.
        #[arg(long = "iterations", default_value_t = 5)]
        iterations: usize,
    },
    /// Finite-difference check of the full loss; exits 3 on failure.
    Gradcheck {
        #[arg(long, env = "DRL_OUT_DIR", default_value = "drl-out")]
        out: PathBuf,
    },
}
