use std::path::PathBuf;
use std::process::ExitCode;

use attnembed_cli::{load_config, run, CliError, Command, SEED_ENV};
use attnembed_core::Execution;
use clap::Parser;

/// Attention-embedding forecasting experiments.
#[derive(Debug, Parser)]
#[command(name = "attnembed", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run config; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.embed.ema_alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{line}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let seed = std::env::var(SEED_ENV).ok();
    let cfg = match load_config(args.config.as_deref(), &args.overrides, seed.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    match run(args.command, &cfg, &args.out, exec) {
        Ok(outcome) => {
            for line in outcome.summary {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
