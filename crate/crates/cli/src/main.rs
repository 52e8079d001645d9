//! `layerslim` — pretrain a toy decoder, cut off its top layers, fine-tune
//! the remainder with prompts, and report seed-averaged grids.
//!
//! Exit codes: 0 success, 2 configuration/data error, 3 numeric/training
//! failure, 4 every grid cell failed.

mod commands;
mod runfile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use layerslim_core::Error;

#[derive(Parser)]
#[command(name = "layerslim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model on a next-token corpus and write a checkpoint.
    Pretrain {
        /// Run file (TOML or JSON) with [pretrain] and [task] sections.
        #[arg(long)]
        run: PathBuf,
        /// Output directory (overrides the run file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop top decoder layers from a checkpoint.
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
        /// Number of layers to keep (1..=n).
        #[arg(long)]
        keep: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpointed model on one task and seed.
    Finetune {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the run file's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpointed model on the task's test split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to evaluate (overrides [model] in the run file).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full (layers × paradigms × seeds) experiment grid.
    Grid {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render table.md and plot.tsv from an existing results.csv.
    Report {
        /// Directory containing results.csv.
        #[arg(long)]
        results: PathBuf,
    },
    /// Import an external tensor archive as a checkpoint.
    Import {
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON name-mapping table: { "external.name": "internal.path" }.
        #[arg(long)]
        map: PathBuf,
        /// Model config JSON for the imported architecture.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Line-oriented JSON event log on stderr; human-readable summary belongs on
/// stdout.
pub(crate) fn log_event(event: serde_json::Value) {
    eprintln!("{event}");
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Training { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { run, out } => commands::pretrain(&run, out.as_deref()),
        Command::Prune { input, keep, out } => commands::prune(&input, keep, &out),
        Command::Finetune { run, out, seed } => commands::finetune(&run, out.as_deref(), seed),
        Command::Evaluate { run, checkpoint } => commands::evaluate(&run, checkpoint.as_deref()),
        Command::Grid { run, out } => commands::grid(&run, out.as_deref()),
        Command::Report { results } => commands::report(&results),
        Command::Import {
            input,
            map,
            config,
            out,
        } => commands::import(&input, &map, &config, &out),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            log_event(serde_json::json!({"event": "error", "message": err.to_string()}));
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
