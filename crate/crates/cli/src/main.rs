fn main() {
    std::process::exit(wsod_cli::run(std::env::args_os()));
}
