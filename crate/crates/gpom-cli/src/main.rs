use std::process::ExitCode;

use gpom_cli::commands;

use clap::Parser;

use gpom::GpomError;

fn main() -> ExitCode {
    let cli = match commands::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are config errors.
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Ok(threads) = std::env::var("GLHF_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: GLHF_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(1);
            }
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &GpomError) -> u8 {
    match e {
        GpomError::InvalidConfig(_) | GpomError::Checkpoint(_) => 1,
        GpomError::Io(_) => 3,
        _ => 2,
    }
}
