use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jlu::datagen::ExtremeBias;
use jlu_cli::commands;
use jlu_cli::config::Experiment;
use jlu_cli::presets;
use jlu_cli::run::TrainOutcome;
use jlu_cli::CliError;

#[derive(Parser)]
#[command(name = "jlu", version, about = "Joint learning and unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    BiasRemoval,
    ExtremeBias,
    MultiAttribute,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Eb1,
    Eb2,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default run config as JSON.
    Config {
        #[arg(value_enum)]
        experiment: PresetName,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Extreme-bias variant.
        #[arg(long, value_enum, default_value = "eb1")]
        variant: Variant,
    },
    /// Write synthetic train/test CSVs and a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the networks a config asks for and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Use this directory instead of <output_dir>/<experiment>-<seed>-<hash8>.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Restart a run directory left incomplete by an interrupted run.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset CSV and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated spurious tasks to probe (default: all).
        #[arg(long, value_delimiter = ',')]
        probe: Option<Vec<String>>,
        /// Baseline checkpoint for percent-unlearned.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write embeddings and their 2-D projection for a dataset.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare completed runs, one row per (run, task).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Config {
            experiment,
            seed,
            variant,
        } => {
            let cfg = match experiment {
                PresetName::BiasRemoval => presets::preset(Experiment::BiasRemoval, seed),
                PresetName::MultiAttribute => presets::preset(Experiment::MultiAttribute, seed),
                PresetName::ExtremeBias => presets::extreme_bias(
                    match variant {
                        Variant::Eb1 => ExtremeBias::Eb1,
                        Variant::Eb2 => ExtremeBias::Eb2,
                    },
                    seed,
                ),
            };
            println!("{}", cfg.to_json());
        }
        Command::GenData { config, out, force } => {
            for p in commands::gen_data(&config, &out, force)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train {
            config,
            run_dir,
            resume,
        } => {
            let (dir, outcome) = commands::train(&config, run_dir.as_deref(), resume)?;
            if outcome == TrainOutcome::AlreadyComplete {
                println!("already complete: {}", dir.display());
            } else {
                println!("run directory: {}", dir.display());
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            probe,
            baseline,
            seed,
            out,
        } => {
            let report = commands::eval(
                &checkpoint,
                &dataset,
                probe.as_deref(),
                baseline.as_deref(),
                seed,
            )?;
            let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?,
                None => print!("{text}"),
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            out,
        } => {
            let n = commands::export_embeddings(&checkpoint, &dataset, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
        Command::Report { runs, csv } => {
            let (table, csv_text, skipped) = commands::report(&runs)?;
            for s in skipped {
                eprintln!("warning: skipping incomplete run {}", s.display());
            }
            print!("{table}");
            if let Some(p) = csv {
                std::fs::write(&p, csv_text).map_err(|e| CliError::io(&p, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
