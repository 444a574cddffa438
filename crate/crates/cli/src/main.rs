fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(irnlm_cli::run(std::env::args_os()))
}
