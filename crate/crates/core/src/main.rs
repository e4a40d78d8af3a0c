use std::process::ExitCode;

fn main() -> ExitCode {
    let code = mtpdec::cli::dispatch(std::env::args_os());
    ExitCode::from(u8::try_from(code.clamp(0, 255)).unwrap_or(1))
}
