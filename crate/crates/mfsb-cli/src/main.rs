use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use mfsb_cli::{run, CliError, Command, FlowFormat, RunOptions, Scenario};

/// Mean-field Schrödinger bridges on the real line.
#[derive(Debug, Parser)]
#[command(name = "mfsb", version)]
struct Args {
    command: Command,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FlowFormat::Bin)]
    format: FlowFormat,
    /// Worker threads; falls back to MFSB_THREADS, then to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Use exact 1-D W₂ instead of the W₁ lower bound in the MKV distance check.
    #[arg(long)]
    strict_w2: bool,
}

fn threads(arg: Option<usize>) -> Result<Option<usize>, CliError> {
    if arg.is_some() {
        return Ok(arg);
    }
    match std::env::var("MFSB_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Parse(format!("MFSB_THREADS={v:?} is not a count"))),
        Err(_) => Ok(None),
    }
}

fn main_inner(args: Args) -> Result<(), CliError> {
    if let Some(n) = threads(args.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Parse(e.to_string()))?;
    }
    let bytes = std::fs::read(&args.scenario)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Parse(e.to_string()))?;
    let prepared = Scenario::from_json(&text)?.prepare()?;
    let opts = RunOptions { out: args.out, format: args.format, strict_w2: args.strict_w2 };
    run(&prepared, &bytes, args.command, &opts)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match main_inner(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mfsb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
