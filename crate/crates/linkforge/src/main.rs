fn main() {
    std::process::exit(linkforge::cli::run_cli(std::env::args_os()));
}
