use std::process::ExitCode;

use clap::Parser;
use concept_atlas_cli::{run, Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if let Command::Inspect { .. } = cli.command {
                println!("{}", serde_json::to_string_pretty(&outcome.report).expect("json values serialize"));
            } else {
                for path in &outcome.written {
                    println!("wrote {}", path.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
