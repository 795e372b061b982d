//! `llc`: generate data, train binary class codes, and evaluate them.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "llc", version, about = "Learned low-dimensional binary class codes")]
#[command(after_long_help = config::keys_help())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory (default: $LLC_REPORT_DIR, else ./llc-out)
    #[arg(long, global = true, value_name = "DIR")]
    report_dir: Option<PathBuf>,
    /// Override one configuration key; repeatable. See `--help` for the key list
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset CSV (key `dataset`)
    #[arg(long, global = true, value_name = "FILE")]
    dataset: Option<PathBuf>,
    /// Model checkpoint (key `checkpoint`)
    #[arg(long, global = true, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Codebook file (key `codebook`)
    #[arg(long, global = true, value_name = "FILE")]
    codebook: Option<PathBuf>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchy (or convert IDX files) into a dataset CSV
    GenData,
    /// Learn the codebook and the instance codes
    Train {
        /// Phases to run: 1, 2 or both (key `phase`)
        #[arg(long)]
        phase: Option<String>,
    },
    /// Classification accuracy with exact and minimum-Hamming decoding
    Eval {
        /// Split to evaluate: train, test or all (key `split`)
        #[arg(long)]
        split: Option<String>,
    },
    /// Hamming retrieval with corrected and reported MAP@K
    Retrieve {
        /// Retrieval depth (key `topk`)
        #[arg(long)]
        topk: Option<usize>,
        /// Codes file used as the database (key `database_codes`)
        #[arg(long, value_name = "FILE")]
        database_codes: Option<PathBuf>,
        /// Codes file used as queries (key `query_codes`)
        #[arg(long, value_name = "FILE")]
        query_codes: Option<PathBuf>,
    },
    /// Out-of-distribution verdicts and F1 for the exact-miss and threshold rules
    Ood {
        /// Out-of-distribution dataset CSV (key `ood_dataset`)
        #[arg(long, value_name = "FILE")]
        ood_dataset: Option<PathBuf>,
    },
    /// Dendrogram, inner-product heatmaps and Spearman table for a codebook
    Taxonomy {
        /// Linkage: single, complete or average (key `linkage`)
        #[arg(long)]
        linkage: Option<String>,
    },
}

fn build_config(cli: &Cli) -> CliResult<RunConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &c.overrides {
        cfg.set_assignment(assignment)?;
    }
    if let Some(dir) = &c.report_dir {
        cfg.set_report_dir(dir.clone());
    }
    let path = |p: &PathBuf| p.to_string_lossy().into_owned();
    let mut flags: Vec<(&str, String)> = Vec::new();
    flags.extend(c.dataset.as_ref().map(|p| ("dataset", path(p))));
    flags.extend(c.checkpoint.as_ref().map(|p| ("checkpoint", path(p))));
    flags.extend(c.codebook.as_ref().map(|p| ("codebook", path(p))));
    match &cli.command {
        Command::GenData => {}
        Command::Train { phase } => flags.extend(phase.clone().map(|v| ("phase", v))),
        Command::Eval { split } => flags.extend(split.clone().map(|v| ("split", v))),
        Command::Retrieve {
            topk,
            database_codes,
            query_codes,
        } => {
            flags.extend(topk.map(|v| ("topk", v.to_string())));
            flags.extend(database_codes.as_ref().map(|p| ("database_codes", path(p))));
            flags.extend(query_codes.as_ref().map(|p| ("query_codes", path(p))));
        }
        Command::Ood { ood_dataset } => flags.extend(ood_dataset.as_ref().map(|p| ("ood_dataset", path(p)))),
        Command::Taxonomy { linkage } => flags.extend(linkage.clone().map(|v| ("linkage", v))),
    }
    for (key, value) in flags {
        cfg.set(key, &value)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Retrieve { .. } => commands::retrieve(&cfg),
        Command::Ood { .. } => commands::ood(&cfg),
        Command::Taxonomy { .. } => commands::taxonomy(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
