use std::process::ExitCode;

fn main() -> ExitCode {
    mfmzip_cli::main_with_args(std::env::args_os().collect())
}
