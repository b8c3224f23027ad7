mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;
use error::CliError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
