use std::process::ExitCode;

fn main() -> ExitCode {
    dipstop_cli::main_from(std::env::args_os())
}
