use std::process::ExitCode;

use clap::Parser;

mod commands;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl CliError {
    /// 1 I/O or runtime failure, 2 invalid arguments or input, 3 invariant
    /// violation.
    fn exit_code(&self) -> u8 {
        use pyramid_core::Error;
        match self {
            CliError::Core(Error::Io(_)) => 1,
            CliError::Core(Error::Invariant(_)) | CliError::Violation(_) => 3,
            CliError::Core(Error::TrainingFailure { .. } | Error::State(_)) => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}
