use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match nlt_cli::run(nlt_cli::Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
