//! `fairmap`: prepare data, train mappings, sweep, select, evaluate and
//! report.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "fairmap", version, about = "Fair mapping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set train.epochs=50`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; same as `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate the dataset and write it with its encoding.
    Prepare(Common),
    /// Train one mapping and checkpoint it.
    Train(Common),
    /// Random search over loss weights; writes the Pareto CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Keep finished trials from a previous run.
        #[arg(long)]
        resume: bool,
    },
    /// Pick the best trade-off on a Pareto CSV.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pareto: Option<PathBuf>,
        /// Number of sensitive groups.
        #[arg(long)]
        k: Option<usize>,
        /// Directory for `selection.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the deployment scenarios with a trained checkpoint.
    Scenario {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validate the selected (or configured) hyperparameters.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        folds: usize,
    },
    /// Consolidate a run directory into report.json and report.csv.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare(c) | Command::Train(c) => c,
            Command::Sweep { common, .. }
            | Command::Select { common, .. }
            | Command::Scenario { common, .. }
            | Command::Crossval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    RunConfig::load(common.config.as_deref(), &common.set, common.seed)
}

/// Config only if one was given on the command line.
fn load_optional(common: &Common) -> anyhow::Result<Option<RunConfig>> {
    if common.config.is_none() && common.set.is_empty() {
        Ok(None)
    } else {
        load(common).map(Some)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.command.common().clone();
    if let Some(n) = common.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match &cli.command {
        Command::Prepare(_) => commands::prepare(&load(&common)?),
        Command::Train(_) => commands::train(&load(&common)?),
        Command::Sweep { resume, .. } => commands::sweep(&load(&common)?, *resume),
        Command::Select { pareto, k, out, .. } => commands::select(
            load_optional(&common)?.as_ref(),
            &commands::SelectArgs {
                pareto: pareto.clone(),
                k: *k,
                out: out.clone(),
            },
        ),
        Command::Scenario { checkpoint, .. } => {
            commands::scenario(&load(&common)?, checkpoint.as_deref())
        }
        Command::Crossval { selection, folds, .. } => {
            commands::crossval(&load(&common)?, selection.as_deref(), *folds)
        }
        Command::Report { run_dir, .. } => {
            let dir = match (run_dir, load_optional(&common)?) {
                (Some(d), _) => d.clone(),
                (None, Some(c)) => c.output_dir,
                (None, None) => anyhow::bail!("report needs --run-dir or --config"),
            };
            report::write(&dir)?;
            println!("report written to {}", dir.join(report::REPORT_JSON).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.command.common().verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
