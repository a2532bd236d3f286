//! Command-line front end for the few-well Bose-Hubbard dynamics engine.
//!
//! Exit codes: 0 success, 1 I/O error, 2 config error, 3 numeric failure,
//! 4 flagged-unreliable result.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hkbose::experiment::{
    compare_metrics, read_series, run_experiment, ExperimentConfig, ExperimentReport,
    CONFIG_SCHEMA,
};
use hkbose::Error;

/// Output root for experiment artifacts.
const OUTPUT_ROOT_VAR: &str = "HKBOSE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "hkbose", version, about = "Exact, TWA and Herman-Kluk dynamics of bosons in two and three wells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a manifest.
    Run { config: PathBuf },
    /// Run one of the bundled presets fig1 to fig7.
    Preset { name: String },
    /// Compare one observable column of two CSV files.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Column to compare; defaults to the first observable.
        #[arg(long)]
        column: Option<String>,
        /// Window start and end in the units of the `t` column.
        #[arg(long, num_args = 2, value_names = ["T0", "T1"])]
        window: Option<Vec<f64>>,
    },
    /// Print the annotated config grammar.
    DumpConfigSchema,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("output"))
}

fn summarize(report: &ExperimentReport) -> u8 {
    println!("output: {}", report.output_dir.display());
    for m in &report.metrics {
        println!(
            "{:<9} rms {:.4e}  max|dev| {:.4e}  revival {:.4} (exact {:.4})  ω {:.4} (exact {:.4})",
            m.backend.name(),
            m.rms,
            m.max_abs_dev,
            m.revival_amplitude,
            m.reference_revival_amplitude,
            m.dominant_frequency,
            m.reference_dominant_frequency,
        );
    }
    for (b, msg) in &report.failures {
        eprintln!("backend {} failed: {msg}", b.name());
    }
    if report.failed() {
        3
    } else if report.flagged() {
        eprintln!("result flagged unreliable; see manifest.toml");
        4
    } else {
        0
    }
}

fn run(config: hkbose::Result<ExperimentConfig>) -> hkbose::Result<u8> {
    let report = run_experiment(&config?, &output_root())?;
    Ok(summarize(&report))
}

fn metrics(a: &Path, b: &Path, column: Option<&str>, window: Option<Vec<f64>>) -> hkbose::Result<u8> {
    let sa = read_series(a, column)?;
    let sb = read_series(b, column)?;
    let window = match window {
        Some(w) => [w[0], w[1]],
        None => [
            sa.times.first().copied().unwrap_or(0.0),
            sa.times.last().copied().unwrap_or(0.0),
        ],
    };
    let m = compare_metrics(&sa, &sb, window)?;
    println!("rms,max_abs_dev,revival_amplitude_a,revival_amplitude_b,dominant_frequency_a,dominant_frequency_b");
    println!(
        "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
        m.rms,
        m.max_abs_dev,
        m.revival_amplitude[0],
        m.revival_amplitude[1],
        m.dominant_frequency[0],
        m.dominant_frequency[1]
    );
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => run(ExperimentConfig::from_file(&config)),
        Command::Preset { name } => run(ExperimentConfig::preset(&name)),
        Command::Metrics {
            a,
            b,
            column,
            window,
        } => metrics(&a, &b, column.as_deref(), window),
        Command::DumpConfigSchema => {
            print!("{CONFIG_SCHEMA}");
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
