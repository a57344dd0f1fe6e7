use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(promptlens::run_cli(std::env::args_os()))
}
