fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(halluc::cli::run(std::env::args_os()))
}
