use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = dpit::cli::Cli::parse();
    match dpit::cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(dpit::cli::exit_code(&e))
        }
    }
}
