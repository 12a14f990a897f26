use std::process::ExitCode;

use care_cli::Command;
use clap::Parser;

/// Covariance-aware GQA to MLA conversion on synthetic attention layers.
#[derive(Debug, Parser)]
#[command(name = "care", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match care_cli::run(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
