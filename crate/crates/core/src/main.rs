use std::process::ExitCode;

fn main() -> ExitCode {
    fedadapter::cli::main_with_args(std::env::args_os())
}
