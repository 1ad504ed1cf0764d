use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = samsel_cli::cli::Cli::parse();
    let level = if args.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match samsel_cli::cli::execute(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
