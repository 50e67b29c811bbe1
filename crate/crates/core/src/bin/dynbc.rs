use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use dynbc::config::ExperimentConfig;
use dynbc::experiment::{run, SUBCOMMANDS};

/// Experiment runner for bulk–surface parabolic problems with dynamic
/// boundary conditions.
#[derive(Parser, Debug)]
#[command(name = "dynbc", version)]
struct Cli {
    /// One of: forward, carleman-check, invert, stability-potentials,
    /// logconvexity, stability-initial, selftest.
    subcommand: String,
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and DYNBC_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random draw of the subcommand.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if !SUBCOMMANDS.contains(&cli.subcommand.as_str()) {
        eprintln!(
            "error: unknown subcommand `{}` (expected one of {})",
            cli.subcommand,
            SUBCOMMANDS.join(", ")
        );
        return ExitCode::from(1);
    }
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let out = cli
        .out
        .or_else(|| std::env::var_os("DYNBC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| cfg.out_dir.clone());
    match run(&cfg, &cli.subcommand, &out, cli.seed) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
