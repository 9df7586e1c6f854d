use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    ExitCode::from(twin_sentinel::runner::cli_main(&args) as u8)
}
