use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nvrm::Precision;
use nvrm_cli::config::{ExperimentConfig, Format};
use nvrm_cli::run::run_experiment;

/// Run an NVRM experiment described by a JSON config.
///
/// Exit status: 0 success, 2 config error, 3 runtime failure or failed check.
#[derive(Parser, Debug)]
#[command(name = "nvrm", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Base seed; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Records file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(Format))]
    format: Option<Format>,
    /// Rerun seeds whose records are already complete.
    #[arg(long)]
    overwrite: bool,
    #[arg(long, value_parser = clap::value_parser!(Precision))]
    precision: Option<Precision>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = ExperimentConfig::load(&args.config).and_then(|mut config| {
        config.seed = args.seed.or(config.seed);
        config.trials = args.trials.unwrap_or(config.trials);
        config.output = args.out.or(config.output);
        config.format = args.format.or(config.format);
        config.precision = args.precision.unwrap_or(config.precision);
        run_experiment(&config, args.overwrite, &mut std::io::stderr())
    });
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("{} records -> {}", outcome.records_written, outcome.path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
