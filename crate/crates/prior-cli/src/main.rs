mod args;
mod commands;
mod config;
mod manifest;

use args::{Cli, Command};
use clap::Parser;

/// Exit codes: 0 success, 2 usage (clap also uses 2 for parse failures),
/// 3 data or compatibility problems, 4 numeric failures.
fn classify(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<prior_core::Error>() {
        return match core {
            prior_core::Error::InvalidArgument(_) => 2,
            prior_core::Error::NumericFailure { .. } => 4,
            _ => 3,
        };
    }
    3
}

fn main() {
    let cli = Cli::parse();
    let config = match config::ConfigFile::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, &config),
        Command::TrainRef(a) => commands::train_ref(a, &config),
        Command::Score(a) => commands::score(a, &config),
        Command::Train(a) => commands::train(a, &config),
        Command::Eval(a) => commands::eval(a, &config),
        Command::Analyze(a) => commands::analyze(a, &config),
        Command::FitScaling(a) => commands::fit_scaling(a, &config),
        Command::CompareRuns(a) => commands::compare_runs(a, &config),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(classify(&e));
        }
    }
}
