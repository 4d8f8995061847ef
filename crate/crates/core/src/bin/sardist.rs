fn main() {
    std::process::exit(sardist::cli::run(std::env::args_os()));
}
