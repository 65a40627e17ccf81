use std::process::ExitCode;

fn main() -> ExitCode {
    bmb::cli::main_with_args(std::env::args_os())
}
