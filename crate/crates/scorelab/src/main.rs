fn main() -> std::process::ExitCode {
    scorelab::cli::main()
}
