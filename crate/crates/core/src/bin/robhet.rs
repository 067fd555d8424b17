use std::process::ExitCode;

fn main() -> ExitCode {
    robhet::cli::main_with_args(std::env::args_os())
}
