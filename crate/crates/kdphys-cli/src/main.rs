//! `kdphys`: batch front end for the pulse-from-video toolkit.

mod cli;
mod commands;
mod run;

use clap::Parser;
use cli::{Cli, Command};

fn main() {
    let args = Cli::parse();
    let result = match &args.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::TrainTeacher(a) => commands::train_teacher_cmd(a),
        Command::Distill(a) => commands::distill(a),
        Command::Infer(a) => commands::infer(a),
        Command::EstimateHr(a) => commands::estimate_hr_cmd(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::OracleCheck(a) => commands::oracle_check(a),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
