use std::process::ExitCode;

use clap::Parser;
use satr_cli::commands::{run, Cli, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::from(EXIT_OK),
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
