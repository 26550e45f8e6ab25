//! Library behind the `matchsrnn` executable. Each subcommand is a plain
//! function over a resolved [`RunConfig`] so tests can drive it directly.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use matchsrnn::train::LossKind;

pub use config::RunConfig;
pub use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] matchsrnn::Error),
}

impl CliError {
    /// 1 for contract/input problems, 2 for numeric or training failures.
    pub fn exit_code(&self) -> u8 {
        use matchsrnn::Error as E;
        match self {
            CliError::Input(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Core(e) => match e {
                E::Numeric(_) | E::NumericCell { .. } | E::Internal(_) => 2,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "matchsrnn", version, about = "Spatial-GRU text matching experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub bidirectional: bool,
    /// Use the hard-max lattice that reproduces the LCS recurrence.
    #[arg(long, global = true)]
    pub exact_mode: bool,
    /// Embedding, interaction and hidden sizes.
    #[arg(long, global = true, value_name = "D_E,C,D", value_parser = config::parse_dims)]
    pub dims: Option<(usize, usize, usize)>,
    #[arg(long, global = true, value_enum)]
    pub loss: Option<LossArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Square,
    Hinge,
    Xent,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Square => LossKind::Square,
            LossArg::Hinge => LossKind::Hinge,
            LossArg::Xent => LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Lcs,
    Ranking,
    Classification,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
        /// Perturb one analytic gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Generate LCS data, train, and compare the learned lattice with DP.
    SimulateLcs,
    /// Write a synthetic dataset (train/valid/test JSONL) to the output directory.
    GenData {
        #[arg(long, value_enum, default_value = "lcs")]
        task: Task,
    },
    /// Train on a JSONL dataset.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Word vectors in text format.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// One token per line; defaults to the dataset header's tokens.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Score a dataset and print its metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        /// Use freshly initialized parameters instead of a checkpoint.
        #[arg(long)]
        random: bool,
    },
    /// Emit the lattice heatmap and backtraced path for one pair.
    Visualize {
        s1: String,
        s2: String,
        #[arg(long, required_unless_present = "exact_mode")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::SimulateLcs => "simulate-lcs",
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Visualize { .. } => "visualize",
        }
    }
}

/// Defaults, then config file, then `--set`, then dedicated flags.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    if let Some(p) = &g.config {
        c.apply_file(p)?;
    }
    for kv in &g.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Input(format!("--set expects key=value, got {kv:?}")))?;
        c.set(k, v)?;
    }
    if let Some(s) = g.seed {
        c.set_seed(s);
    }
    if let Some((de, ci, d)) = g.dims {
        (c.train.embed_dim, c.train.interaction_dim, c.train.hidden_dim) = (de, ci, d);
    }
    if let Some(l) = g.loss {
        c.train.loss = l.into();
    }
    if g.bidirectional {
        c.train.bidirectional = true;
    }
    Ok(c)
}

/// Run a parsed command line. `argv` is recorded in the manifest.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<(), CliError> {
    let config = resolve_config(&cli.global)?;
    let mut ctx = commands::Ctx::new(cli, config, argv)?;
    let result = commands::dispatch(&mut ctx, &cli.command);
    ctx.finish(&result)?;
    result
}
