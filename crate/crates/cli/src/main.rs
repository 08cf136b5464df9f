mod args;
mod commands;
mod config;
mod failure;
mod files;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use failure::{Failure, Outcome};

fn init_threads(threads: usize) -> Outcome {
    if threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    if threads > 1 {
        log::warn!("built without the parallel feature; running on one thread");
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = config::load(cli.config.as_deref())?.with_seed(cli.seed);
    init_threads(cli.threads.or(cfg.threads).unwrap_or(1))?;
    match &cli.command {
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Train(a) => commands::train(&cfg, a),
        Command::Score(a) => commands::score(&cfg, a),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::Baseline(a) => commands::baseline(&cfg, a),
        Command::TheoryCheck(a) => commands::theory_check(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
