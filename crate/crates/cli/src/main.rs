use std::process::ExitCode;

use clap::Parser;
use csmil_cli::{init_logging, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_logging().and_then(|()| run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("csmil: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
