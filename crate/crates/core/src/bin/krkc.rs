use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use krkc::experiment::{self, ExperimentConfig, ExperimentError, Overrides, OUT_ENV};

#[derive(Parser)]
#[command(name = "krkc", version, about = "Lifelong representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured strategy for every seed and write results.
    Run {
        /// TOML config file, or `default` for the built-in config.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',')]
        strategy: Option<Vec<String>>,
        /// Output root; falls back to the config's `out_dir`.
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Aggregate completed runs into a median table and a CSV.
    Report {
        /// Result roots or run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// CSV destination; defaults to `report.csv` in the first directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the generated stream as train/query/gallery CSV files.
    ExportData {
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            strategy,
            out,
            tasks,
            epochs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            Overrides {
                seed,
                strategies: strategy,
                out_dir: out,
                tasks,
                epochs,
            }
            .apply(&mut cfg)?;
            for dir in experiment::run_experiment(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Report { dirs, csv } => {
            let report = experiment::build_report(&dirs)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", report.to_text());
            let path = csv.unwrap_or_else(|| dirs[0].join("report.csv"));
            std::fs::write(&path, report.to_csv()?)?;
            println!("wrote {}", path.display());
        }
        Command::ExportData { config, seed, tasks, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            Overrides {
                seed,
                tasks,
                ..Default::default()
            }
            .apply(&mut cfg)?;
            experiment::export_data(&cfg, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
