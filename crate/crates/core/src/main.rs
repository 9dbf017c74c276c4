use std::process::ExitCode;

fn main() -> ExitCode {
    match varfuse::cli::run(std::env::args_os(), &mut std::io::stdout()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", varfuse::cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
