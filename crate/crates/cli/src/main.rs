//! `fsosr`: data generation, training, evaluation, sweeps and gradient checks.
//!
//! Exit status: 0 success, 1 invalid flags or inputs, 2 runtime abort,
//! 3 gradient-check failure. Inputs are validated before anything is written.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Failure;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::GradCheck(a) => commands::grad_check_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invalid(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("aborted: {m}"),
                Failure::GradCheck => eprintln!("gradient check failed"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
