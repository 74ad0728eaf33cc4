fn main() {
    std::process::exit(nestknn::cli::run(std::env::args()));
}
