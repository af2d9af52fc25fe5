fn main() -> std::process::ExitCode {
    fogrune::cli::run()
}
