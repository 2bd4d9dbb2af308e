use std::process::ExitCode;

use clap::Parser;
use resdense_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            log::error!("{err}");
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
