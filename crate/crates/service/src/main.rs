fn main() -> std::process::ExitCode {
    peak_service::cli::main()
}
