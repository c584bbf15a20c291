use std::process::ExitCode;

fn main() -> ExitCode {
    cppap::cli::main()
}
