use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smile_cli::runner::{allocation_dry_run, enumerate_report, format_allocation, prepare};
use smile_cli::{run_experiment, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "smile", version, about = "Stable spectrum sharing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy and write CSV/JSON artifacts.
    Run {
        config: PathBuf,
        /// Output directory (overrides SMILE_OUTPUT_DIR and the config).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Worker threads for replications.
        #[arg(short, long)]
        jobs: Option<usize>,
    },
    /// One allocation phase on the true means, printing the iteration log.
    Alloc { config: PathBuf },
    /// Print the system constants as JSON.
    Constants { config: PathBuf },
    /// List every stable allocation (small instances only).
    Enumerate { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, output, jobs } => {
            let loaded = ExperimentConfig::load(&config)?;
            let report = run_experiment(&loaded, output.as_deref(), jobs)?;
            for warning in &report.prepared.warnings {
                eprintln!("warning: {warning}");
            }
            let oracle = &report.prepared.oracle.allocation;
            println!(
                "oracle sum rate {}",
                oracle.value(&report.prepared.instance.means)
            );
            for result in &report.results {
                println!(
                    "{:>6}: final mean regret {:.1}, tail mean sum rate {:.3}",
                    result.policy.name(),
                    result.mean_final_regret(),
                    result.mean_tail_rate()
                );
            }
            println!("wrote {}", report.output_dir.display());
        }
        Command::Alloc { config } => {
            let loaded = ExperimentConfig::load(&config)?;
            let prepared = prepare(&loaded.config)?;
            let solution = allocation_dry_run(&prepared.instance, prepared.params)?;
            print!("{}", format_allocation(&solution));
        }
        Command::Constants { config } => {
            let loaded = ExperimentConfig::load(&config)?;
            let prepared = prepare(&loaded.config)?;
            let text = serde_json::to_string_pretty(&prepared.constants)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{text}");
        }
        Command::Enumerate { config } => {
            let loaded = ExperimentConfig::load(&config)?;
            let prepared = prepare(&loaded.config)?;
            print!("{}", enumerate_report(&prepared.instance)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
