use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eventpriv::commands::{cmd_audit, cmd_encode, cmd_report_merge, cmd_simulate};
use eventpriv::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "eventpriv",
    version,
    about = "Event-level identifiability audit for EHR event features"
)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding cli_reporting.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode an event log into a sparse binary matrix.
    Encode {
        /// Event log, overriding event_model.log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Ablation audit for one sensitive code.
    Audit {
        /// Sensitive code to audit, overriding cohort_builder.sensitive_code.
        #[arg(long)]
        code: Option<String>,
    },
    /// Random-simulation baselines.
    Simulate,
    /// Merge per-disease grid files.
    ReportMerge {
        /// Audit directories or grid files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.cli_reporting.seed = seed;
    }
    let written = match cli.command {
        Command::Encode { log } => {
            if log.is_some() {
                cfg.event_model.log = log;
            }
            cmd_encode(&cfg, &cli.out, cli.force)?
        }
        Command::Audit { code } => {
            if let Some(code) = code {
                cfg.cohort_builder.sensitive_code = code;
            }
            cmd_audit(&cfg, &cli.out, cli.force)?
        }
        Command::Simulate => cmd_simulate(&cfg, &cli.out, cli.force)?,
        Command::ReportMerge { inputs } => cmd_report_merge(&cfg, &inputs, &cli.out, cli.force)?,
    };
    Ok(written)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
