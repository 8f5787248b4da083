fn main() {
    std::process::exit(retrialq::cli::run(std::env::args_os()));
}
