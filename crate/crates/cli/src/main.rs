//! `standda`: anomaly detection after domain adaptation, with selective
//! p-values for every flagged target row.

mod commands;
mod config;
mod failure;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::Run;
use config::Sources;
use failure::Failure;

#[derive(Parser)]
#[command(name = "standda", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Flag anomalies without inference.
    Detect(Common),
    /// Flag anomalies and compute p-values for each flagged target row.
    Infer(Common),
    /// Run a false-positive, power, runtime or real-data study.
    Experiment(Common),
    /// Runtime study on both backends.
    Bench(Common),
    /// Load a bundle and report its shape.
    ValidateBundle(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON config file (`.json` selects JSON).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(short, long, default_value = "standda-out")]
    out: PathBuf,
    /// `key=value` overrides; dotted keys reach nested tables.
    overrides: Vec<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Detect(_) => "detect",
            Command::Infer(_) => "infer",
            Command::Experiment(_) => "experiment",
            Command::Bench(_) => "bench",
            Command::ValidateBundle(_) => "validate-bundle",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Detect(c)
            | Command::Infer(c)
            | Command::Experiment(c)
            | Command::Bench(c)
            | Command::ValidateBundle(c) => c,
        }
    }
}

fn write_manifest(cmd: &Command, run: &Run, result: &Result<(), Failure>) -> Result<(), Failure> {
    let common = cmd.common();
    let manifest = json!({
        "tool": "standda",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cmd.name(),
        "config_file": common.config,
        "overrides": common.overrides,
        "seed_flag": common.seed,
        "config": run.config,
        "outputs": run.outputs,
        "notes": run.notes,
        "status": if result.is_ok() { "ok" } else { "error" },
        "exit_code": result.as_ref().map_or_else(|f| f.code, |_| 0),
        "error": result.as_ref().err().map(|f| f.message.clone()),
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let path = run.out.join("manifest.json");
    fs::write(&path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = cli.command.common();
    if let Err(e) = fs::create_dir_all(&common.out) {
        eprintln!("error: output directory {}: {e}", common.out.display());
        return ExitCode::from(failure::IO as u8);
    }
    let src = Sources {
        file: common.config.as_deref(),
        overrides: &common.overrides,
        seed: common.seed,
    };
    let mut run = Run::new(common.out.clone());
    let result = match &cli.command {
        Command::Detect(_) => commands::detect(&mut run, &src),
        Command::Infer(_) => commands::infer(&mut run, &src),
        Command::Experiment(_) => commands::experiment(&mut run, &src),
        Command::Bench(_) => commands::bench(&mut run, &src),
        Command::ValidateBundle(_) => commands::validate_bundle(&mut run, &src),
    };
    let written = write_manifest(&cli.command, &run, &result);
    match result.and(written) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
