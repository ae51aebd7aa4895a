use std::process::ExitCode;

use clap::Parser;
use lvseg_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Some(n) = std::env::var("LV_PIPELINE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line: stage name, then the whole cause chain
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("lvseg: error: stage={}: {msg}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}
