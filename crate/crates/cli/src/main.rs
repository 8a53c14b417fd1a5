fn main() {
    std::process::exit(emrf_cli::run_cli(std::env::args_os()));
}
