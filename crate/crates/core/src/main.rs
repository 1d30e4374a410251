use std::process::ExitCode;

use clap::Parser;
use seroprev::cli::{self, Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Estimate(args) => cli::cmd_estimate(args).map(|s| (s, true)),
        Command::Simulate(args) => cli::cmd_simulate(args),
        Command::Oracle(args) => cli::cmd_oracle(args).map(|s| (s, true)),
    };
    match outcome {
        Ok((output, complete)) => {
            print!("{output}");
            if complete {
                ExitCode::SUCCESS
            } else {
                eprintln!("warning: some scenarios were skipped as infeasible");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
