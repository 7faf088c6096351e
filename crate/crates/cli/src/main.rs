use std::process::ExitCode;

use ceg_cli::{run, with_workers, workers_from_env, Cli, CliError, WORKERS_ENV};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = workers_from_env(std::env::var(WORKERS_ENV).ok().as_deref()).and_then(|workers| {
        with_workers(workers, || std::panic::catch_unwind(|| run(cli)))
    });
    let outcome = match result {
        Ok(Ok(r)) => r,
        Ok(Err(_)) => Err(CliError::Invariant("panicked".into())),
        Err(e) => Err(e),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
