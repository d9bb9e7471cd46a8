use std::process::ExitCode;

fn main() -> ExitCode {
    raldkit::cli::main_entry()
}
