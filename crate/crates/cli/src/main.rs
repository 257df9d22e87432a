mod args;
mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use statechef::dataset::DataError;
use statechef::manifest::ManifestError;
use statechef::model::ModelError;
use statechef::predictions::DumpError;
use statechef::report::ReportError;
use statechef::taxonomy::TaxonomyError;

use crate::args::Cli;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Bad flag values or config contents.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
            || cause.is::<ManifestError>()
            || cause.is::<TaxonomyError>()
            || cause.is::<DataError>()
            || cause.is::<DumpError>()
            || cause.is::<ReportError>()
        {
            return EXIT_DATA;
        }
        if let Some(ModelError::WeightsUnavailable(_) | ModelError::Checkpoint(_)) = cause.downcast_ref::<ModelError>()
        {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
