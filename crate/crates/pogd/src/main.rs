use std::process::ExitCode;

fn main() -> ExitCode {
    pogd::cli::run(std::env::args_os())
}
