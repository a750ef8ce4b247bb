fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(forcegrasp::cli::main_with_args(std::env::args_os()))
}
