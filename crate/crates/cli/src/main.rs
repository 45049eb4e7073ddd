use std::process::ExitCode;

use clap::Parser;
use cmc_cli::{run, threads_from_env, Cli, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = threads_from_env().and_then(|threads| {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::config(e.to_string()))?;
        }
        run(cli)
    });
    match outcome {
        Ok(manifest) => {
            log::info!("{} artifacts, digest {}", manifest.artifacts.len(), manifest.digest);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
