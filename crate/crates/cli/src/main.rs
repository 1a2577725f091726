fn main() -> std::process::ExitCode {
    unitflow_cli::run_main(std::env::args_os())
}
