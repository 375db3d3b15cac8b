use std::process::ExitCode;

use clap::Parser;
use palps_cli::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PALPS_LOG", "warn")).init();
    let cli = Cli::parse();
    match palps_cli::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
