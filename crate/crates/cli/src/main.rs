fn main() {
    std::process::exit(exitflow_cli::run(std::env::args_os()));
}
