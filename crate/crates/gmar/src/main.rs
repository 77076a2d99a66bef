fn main() {
    std::process::exit(gmar::cli::run(std::env::args()));
}
