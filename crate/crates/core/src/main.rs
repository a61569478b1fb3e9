use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = qkan::cli::Cli::parse();
    match qkan::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
