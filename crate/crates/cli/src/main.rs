mod args;
mod commands;
mod run;

use std::process::ExitCode;

use clap::Parser;
use swimdiff::Error;

use args::{Cli, Command, EvalCommand};

/// 2: usage or configuration, 3: data or contract, 4: runtime or numeric.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Param(_) | Error::Config(_) => 2,
        Error::Contract(_)
        | Error::Manifest(_)
        | Error::Format(_)
        | Error::Io { .. }
        | Error::Checkpoint(_)
        | Error::Version { .. } => 3,
        Error::Training { .. } | Error::Tensor(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let runs = &cli.runs_dir;
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Pretrain(a) => commands::pretrain(runs, a),
        Command::Eval(EvalCommand::ChangeDetect(a)) => commands::change_detect(runs, a),
        Command::Eval(EvalCommand::Classify(a)) => commands::classify(runs, a),
        Command::Eval(EvalCommand::Inspect(a)) | Command::Inspect(a) => commands::inspect(runs, a),
        Command::Sweep(a) => commands::sweep(runs, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
