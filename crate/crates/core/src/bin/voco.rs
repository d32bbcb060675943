fn main() -> std::process::ExitCode {
    voco::cli::main()
}
