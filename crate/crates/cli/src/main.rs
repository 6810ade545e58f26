#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;
mod manifest;
mod plot;

use std::process::ExitCode;

use clap::Parser;
use sdeinv::Status;

use args::{Cli, Command};
use commands::{Outcome, UsageError};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn print_outcome(o: &Outcome) {
    for e in &o.report.entries {
        let tag = match e.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Warn => "warn",
        };
        println!("{tag:<5} {:<30} metric {:>11.4e}  tol {:>9.2e}  {}", e.check_id, e.metric, e.tolerance, e.details);
    }
    println!("manifest: {}", o.manifest.display());
    println!("{}", if o.passed { "all judged checks passed" } else { "some checks failed" });
}

fn run(cli: Cli) -> Result<bool, UsageError> {
    let outcome = match &cli.command {
        Command::Validate(common) => commands::validate(common)?,
        Command::Resolvent { common, alpha, boxes } => commands::resolvent(common, *alpha, *boxes)?,
        Command::Simulate { common, paths, dt, horizon, tests } => commands::simulate_cmd(common, *paths, *dt, *horizon, tests)?,
        Command::Report { manifests, out_dir } => {
            let (passed, out, lines) = commands::report(manifests, out_dir)?;
            lines.iter().for_each(|l| println!("{l}"));
            println!("consolidated: {}", out.display());
            return Ok(passed);
        }
    };
    print_outcome(&outcome);
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
