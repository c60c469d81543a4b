//! `dipt`: pretrain a backbone, run the domain-incremental experiment, and
//! aggregate or inspect its artifacts.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad config, 3 missing
//! artifact from an earlier subcommand, 4 empty input.

mod commands;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dipt_core::experiment::Method;

#[derive(Parser)]
#[command(name = "dipt", version, about = "Decoupled prompt tuning for domain-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed list (pretrain: the pretraining seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reports the FTU variant that also counts held-out domains.
    #[arg(long)]
    pub include_heldout_ftu: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ours,
    Seqft,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::Seqft => Method::Seqft,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run one method over every seed of the synthetic stream.
    Run {
        #[arg(long, value_enum, default_value = "ours")]
        method: MethodArg,
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate saved run artifacts on every domain's test split.
    Eval {
        #[arg(long, value_enum, default_value = "ours")]
        method: MethodArg,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate per-seed reports into a mean ± std table.
    Report {
        /// A method directory, or a directory of method directories.
        dir: PathBuf,
    },
    /// Style-augment a folder of PNGs with amplitude keys.
    Augment {
        #[arg(long)]
        input: PathBuf,
        /// PNG directories (one key each, their mean amplitude) or bank files.
        #[arg(long, required = true, num_args = 1..)]
        keys: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump the tensors, shapes and keys of a bank file as JSON.
    InspectBank { bank: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::Run { method, common } => commands::run(&common, method.into()),
        Command::Eval { method, common } => commands::eval(&common, method.into()),
        Command::Report { dir } => commands::report(&dir),
        Command::Augment { input, keys, out, seed } => commands::augment(&input, &keys, &out, seed),
        Command::InspectBank { bank } => commands::inspect_bank(&bank),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dipt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
