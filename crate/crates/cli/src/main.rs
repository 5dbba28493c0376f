fn main() {
    std::process::exit(kerr_cli::run(std::env::args_os()));
}
