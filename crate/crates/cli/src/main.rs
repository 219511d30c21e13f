use std::process::ExitCode;

use clap::Parser;
use voxfuse_cli::{run, Args};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let config = Args::parse().into_config();
    match run(&config) {
        Ok(summary) => {
            println!("{}", summary.line(&config.output));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("voxfuse: {e}");
            ExitCode::FAILURE
        }
    }
}
