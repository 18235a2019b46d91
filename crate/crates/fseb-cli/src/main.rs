//! `fseb` — configuration-driven trainer and evaluator for the
//! function-space regularization toolkit.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for
//! numerical aborts (non-finite losses), 1 for other runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fseb_cli::error::Result;
use fseb_cli::runner::{self, AblationAxis};

#[derive(Parser)]
#[command(name = "fseb", version, about = "Train and evaluate function-space regularized models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write results + artifacts.
    Run {
        /// Path to an experiment config (JSON).
        config: PathBuf,
    },
    /// Sweep one config axis, one full run per value.
    Ablate {
        /// Path to the base experiment config (JSON).
        config: PathBuf,
        /// Which axis to sweep.
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Comma-separated axis values, e.g. `32,64,128`.
        #[arg(long)]
        values: String,
    },
    /// Emit grid predictions from a saved checkpoint.
    Grid {
        /// Path to a checkpoint file written by `run`.
        checkpoint: PathBuf,
        /// Config whose `eval.grid` defines the grid.
        #[arg(long)]
        spec: PathBuf,
        /// Output CSV path (default: `<output_dir>/grid_from_checkpoint.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate one or more results files side by side.
    Compare {
        /// Paths to `results.json` files.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Directory for `compare.md` and `compare.csv`.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            runner::cmd_run(&config)?;
        }
        Command::Ablate { config, axis, values } => {
            runner::cmd_ablate(&config, axis, &values)?;
        }
        Command::Grid { checkpoint, spec, out } => {
            runner::cmd_grid(&checkpoint, &spec, out.as_deref())?;
        }
        Command::Compare { paths, out_dir } => {
            runner::cmd_compare(&paths, &out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fseb: {}", err);
            err.exit_code()
        }
    }
}
