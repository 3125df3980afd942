use std::process::ExitCode;

use clap::Parser;
use containment_cli::{execute, Cli, Command, EXIT_USAGE};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = execute(&cli);
    for note in &out.notes {
        eprintln!("{note}");
    }
    let target = match &cli.command {
        Command::Run(a) => &a.flow.out,
        Command::Check(a) => &a.flow.out,
        Command::Gates(a) => &a.flow.out,
        Command::Sweep(a) => &a.flow.out,
        Command::Replay(a) => &a.flow.out,
    };
    match target {
        Some(path) if !out.artifact.is_empty() => {
            if let Err(e) = std::fs::write(path, &out.artifact) {
                eprintln!("error: cannot write `{}`: {e}", path.display());
                return ExitCode::from(EXIT_USAGE);
            }
        }
        _ => print!("{}", out.artifact),
    }
    ExitCode::from(out.code)
}
