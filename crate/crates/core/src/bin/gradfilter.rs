use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gradfilter::cli::{self, Config};

/// Gradient-filtering experiments: training, cost sweeps and spectral checks.
#[derive(Parser, Debug)]
#[command(name = "gradfilter", version)]
struct Args {
    /// train | cost-sweep | verify-prop1 | dc-ratio | snr-probe (defaults to the
    /// config's `command` key)
    command: Option<String>,

    /// Config file with `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Per-key override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load_config(args: &Args) -> gradfilter::Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::parse(&std::fs::read_to_string(p)?)?,
        None => Config::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load_config(&args).and_then(|cfg| cli::run(args.command.as_deref(), cfg, &args.out));
    match result {
        Ok(outcome) => {
            if outcome == cli::Outcome::Violation {
                eprintln!("property violation; see {}", args.out.display());
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::error_exit_code(&e) as u8)
        }
    }
}
