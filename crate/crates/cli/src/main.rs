//! `sliver` — experiment orchestration for the streaming label-join engine.
//!
//! Subcommands compose through files in one output directory. The first
//! command to touch a directory snapshots the effective config there; later
//! commands refuse to run if their config differs, so an artifact directory
//! is always internally consistent and reproducible from its own snapshot.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;
mod config;

use config::ParadigmKind;

/// Process-level error taxonomy: usage errors (bad flags, missing
/// prerequisites, config drift) exit 1; runtime failures (I/O, corrupt
/// inputs) exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sliver", version, about = "Streaming label-join experiments")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Experiment config (TOML). Defaults to the snapshot in the output
    /// directory if present, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts (default: $SLIVER_OUT or
    /// ./sliver-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the event log and ground truth.
    Generate,
    /// Join events into labeled training samples under one paradigm.
    Label {
        /// one-hour | five-minute | sliver
        #[arg(long)]
        paradigm: String,
        /// Override the paradigm's window length.
        #[arg(long)]
        window_ms: Option<i64>,
        /// Override the sliding paradigm's window alignment epoch.
        #[arg(long)]
        t_uni_ms: Option<i64>,
    },
    /// Compare emitted labels against eventual ground truth by delay bucket.
    Audit {
        #[arg(long)]
        paradigm: String,
    },
    /// Train one model on one paradigm's label stream.
    Train {
        #[arg(long)]
        paradigm: String,
        /// shared-bottom | mmoe (default: from config)
        #[arg(long)]
        arch: Option<String>,
    },
    /// Alternating train/evaluate over the test hours, all paradigms.
    Eval {
        #[arg(long)]
        arch: Option<String>,
        /// Restrict to a single paradigm.
        #[arg(long)]
        paradigm: Option<String>,
    },
    /// Paired serving simulation with and without re-recommendation.
    RerecoSim {
        /// on | off (default: both, paired)
        #[arg(long)]
        rereco: Option<String>,
        /// Override the refresh period.
        #[arg(long)]
        rereco_period_ms: Option<i64>,
        /// Score with a trained checkpoint instead of a fresh model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render an evaluation report as markdown.
    Report {
        #[arg(long)]
        arch: Option<String>,
    },
    /// One-shot in-memory sweep: every paradigm × every configured model.
    Compare,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    let mut eff = config::resolve(
        common.config.as_deref(),
        common.out.as_deref(),
        common.seed,
    )?;

    match cli.command {
        Command::Generate => commands::generate_cmd(&eff),
        Command::Label {
            paradigm,
            window_ms,
            t_uni_ms,
        } => {
            let kind = ParadigmKind::parse(&paradigm)?;
            if window_ms.is_some() || t_uni_ms.is_some() {
                let spec = eff.config.paradigm_mut(kind)?;
                if let Some(w) = window_ms {
                    spec.window_ms = Some(w);
                }
                if let Some(t) = t_uni_ms {
                    spec.t_uni_ms = Some(t);
                }
                eff.config.validate()?;
            }
            commands::label_cmd(&eff, kind)
        }
        Command::Audit { paradigm } => {
            let kind = ParadigmKind::parse(&paradigm)?;
            commands::audit_cmd(&eff, kind)
        }
        Command::Train { paradigm, arch } => {
            let kind = ParadigmKind::parse(&paradigm)?;
            commands::train_cmd(&eff, kind, arch.as_deref())
        }
        Command::Eval { arch, paradigm } => {
            let only = paradigm.map(|p| ParadigmKind::parse(&p)).transpose()?;
            commands::eval_cmd(&eff, arch.as_deref(), only)
        }
        Command::RerecoSim {
            rereco,
            rereco_period_ms,
            model,
        } => {
            let filter = match rereco.as_deref() {
                None => None,
                Some("on") => Some(true),
                Some("off") => Some(false),
                Some(other) => {
                    return Err(CliError::Usage(format!(
                        "--rereco must be 'on' or 'off', got '{other}'"
                    )))
                }
            };
            if let Some(period) = rereco_period_ms {
                eff.config.rereco.period_ms = period;
                eff.config.validate()?;
            }
            commands::rereco_cmd(&eff, filter, model.as_deref())
        }
        Command::Report { arch } => commands::report_cmd(&eff, arch.as_deref()),
        Command::Compare => commands::compare_cmd(&eff),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap uses exit code 2 for usage; this tool reserves 2 for
            // runtime failures and reports usage problems as 1.
            let code = match err.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
