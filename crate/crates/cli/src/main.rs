use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mrp_cli::run(std::env::args_os()))
}
