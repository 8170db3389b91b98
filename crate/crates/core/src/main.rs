fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(mmtoc::cli::run(std::env::args_os()))
}
