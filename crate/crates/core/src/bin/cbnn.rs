use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(cbnn::cli::run(cbnn::cli::Cli::parse()))
}
