use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use oldnash::config::parse_config;
use oldnash::runner::{error_json, run_scenario, Command, EXIT_CONFIG};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    /// Diagnostics battery with pass/fail per check.
    Verify,
    /// Followers' equilibrium for a fixed leader control.
    Nash,
    /// Leader's approximate-controllability problem at `leader.epsilon`.
    Leader,
    /// Leader problem over `leader.epsilons`.
    Sweep,
}

#[derive(Debug, Parser)]
#[command(name = "oldnash", version, about = "Stackelberg-Nash control of the linearized Oldroyd fluid")]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `run.out` (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn fail(out: Option<&PathBuf>, value: serde_json::Value, exit: i32) -> ExitCode {
    let text = serde_json::to_string_pretty(&value).unwrap_or_default();
    eprintln!("{text}");
    if let Some(dir) = out {
        if fs::create_dir_all(dir).is_ok() {
            let _ = fs::write(dir.join("error.json"), format!("{text}\n"));
        }
    }
    ExitCode::from(exit as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Sub::Verify => Command::Verify,
        Sub::Nash => Command::Nash,
        Sub::Leader => Command::Leader,
        Sub::Sweep => Command::Sweep,
    };
    let text = match fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            let msg = format!("cannot read {}: {e}", cli.config.display());
            return fail(cli.out.as_ref(), error_json("E_IO", &msg, 4, None), 4);
        }
    };
    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            return fail(cli.out.as_ref(), error_json(e.code(), &e.message, EXIT_CONFIG, e.line), EXIT_CONFIG);
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match run_scenario(command, &config, &out) {
        Ok(outcome) => {
            let status = if outcome.exit_code == 0 { "ok" } else { "FAILED" };
            println!("{}: {status} ({} files under {})", command.name(), outcome.files.len(), out.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            let exit = e.exit_code();
            fail(Some(&out), error_json(e.code(), &e.to_string(), exit, None), exit)
        }
    }
}
