//! `ngcg` command line: corpus generation, training, embedding, evaluation,
//! ablation grids and the gradient suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

pub mod ablate;
pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ngcg::datagen::Split;
use thiserror::Error;

pub use ablate::{ablation_cells, Axis, CSV_HEADER};
pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn runtime(e: impl Into<anyhow::Error>) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Side {
    Text,
    Image,
}

#[derive(Debug, Parser)]
#[command(name = "ngcg", version, about = "Text-guided cross-view geo-localization at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as JSON Lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        scenes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train on the corpus described by the config's data section.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Embed one side of a corpus split into an embedding file.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, value_enum)]
        side: Side,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve every query against the index and report R@K and L@D.
    Eval {
        #[arg(long)]
        query_emb: PathBuf,
        #[arg(long)]
        index_emb: PathBuf,
        /// Corpus JSON Lines, or CSV with columns query_id,truth_id,lat,lon.
        #[arg(long)]
        truth: PathBuf,
        /// Report path; the JSON and CSV reports share its stem.
        #[arg(long)]
        out: PathBuf,
        /// L@D also requires the top-1 candidate to be the true one.
        #[arg(long)]
        strict_loc: bool,
    },
    /// Train and evaluate every setting of one axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Finite-difference check of every operator and the training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            out,
            scenes,
            seed,
            noise,
        } => commands::gen_data(&out, scenes, seed, noise),
        Command::Train { config, out_ckpt, log } => commands::train(config.as_deref(), &out_ckpt, &log).map(|_| ()),
        Command::Embed {
            ckpt,
            corpus,
            split,
            side,
            out,
        } => commands::embed(&ckpt, &corpus, split.into(), side, &out),
        Command::Eval {
            query_emb,
            index_emb,
            truth,
            out,
            strict_loc,
        } => commands::eval(&query_emb, &index_emb, &truth, &out, strict_loc).map(|_| ()),
        Command::Ablate { axis, config, out_csv } => ablate::run(axis, config.as_deref(), &out_csv),
        Command::Gradcheck { seed, inject_bug } => commands::gradcheck(seed, inject_bug),
    }
}
