use std::process::ExitCode;

fn main() -> ExitCode {
    topkmon::cli::run()
}
