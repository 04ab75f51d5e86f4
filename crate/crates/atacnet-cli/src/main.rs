fn main() {
    std::process::exit(atacnet_cli::run(std::env::args_os()));
}
