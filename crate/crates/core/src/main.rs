fn main() {
    std::process::exit(cyclewalk::cli::run_cli(std::env::args_os()));
}
