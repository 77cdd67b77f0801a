fn main() {
    std::process::exit(mctueg::runio::cli::run(std::env::args_os()));
}
