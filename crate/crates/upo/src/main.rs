use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use upo::{config, execute, Command, Outcome};

/// Unmasking-order policy experiments.
///
/// Any `--key value` after the config path overrides a config entry; nested
/// keys use dots, e.g. `--train.lr 0.1`.
#[derive(Parser, Debug)]
#[command(name = "upo", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = config::parse_overrides(&cli.overrides).and_then(|o| config::load(&cli.config, &o)).and_then(|c| {
        c.resolve_seed()?;
        Ok(c)
    });
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(c) = cfg.command.filter(|c| *c != cli.command) {
        eprintln!("note: config names command {c:?}, running {:?}", cli.command);
    }
    match execute(cli.command, &cfg) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
