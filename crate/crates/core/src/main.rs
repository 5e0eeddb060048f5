fn main() -> std::process::ExitCode {
    percevox::cli::main()
}
