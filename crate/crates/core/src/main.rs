fn main() -> std::process::ExitCode {
    semrel::cli::main_with_args(std::env::args_os())
}
