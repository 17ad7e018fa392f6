//! `larar` command-line runner.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on usage errors such as
//! unknown flags, a missing dataset or an unreadable config file.

mod args;
mod commands;
mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;
use larar::LararError;

use crate::args::Cli;

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || matches!(e.downcast_ref::<LararError>(), Some(LararError::InvalidConfig(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let kind = if code == 2 { "usage" } else { "runtime" };
            eprintln!("error[{kind}]: {err}");
            let mut last = err.to_string();
            for cause in err.chain().skip(1) {
                let text = cause.to_string();
                if !last.contains(&text) {
                    eprintln!("  caused by: {text}");
                }
                last = text;
            }
            ExitCode::from(code)
        }
    }
}
