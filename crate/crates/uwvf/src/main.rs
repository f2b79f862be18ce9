use std::process::ExitCode;

fn main() -> ExitCode {
    uwvf::cli::main()
}
