fn main() -> std::process::ExitCode {
    marketpalace::cli::main()
}
