fn main() -> std::process::ExitCode {
    kdlic_cli::run(std::env::args_os())
}
