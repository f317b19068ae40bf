use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(cdm_drift::cli::run_from_args(std::env::args_os()))
}
