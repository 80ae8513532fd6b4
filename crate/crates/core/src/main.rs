use std::process::ExitCode;

fn main() -> ExitCode {
    fpf::cli::main_with_args(std::env::args_os())
}
