//! `cmtf`: train, evaluate, generate and benchmark coupled sparse Tucker
//! factorizations.
//!
//! Exit codes: 0 success, 1 bad arguments or input, 2 training diverged.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // Help and version go to stdout; everything else to stderr with
            // the usage line clap appends.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gen(a) => commands::gen(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .downcast_ref::<cmtf_core::Error>()
                .is_some_and(|e| matches!(e, cmtf_core::Error::Divergence { .. }));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}
