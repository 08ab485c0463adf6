fn main() -> std::process::ExitCode {
    unicornn::cli::main()
}
