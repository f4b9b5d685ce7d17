use std::process::ExitCode;

fn main() -> ExitCode {
    tabserial::cli::main_entry()
}
