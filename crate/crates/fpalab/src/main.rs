//! Binary entry point; all behavior lives in [`fpalab::cli`].

use std::process::ExitCode;

fn main() -> ExitCode {
    match fpalab::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(1, 255) as u8)
        }
    }
}
