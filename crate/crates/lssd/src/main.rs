fn main() {
    std::process::exit(lssd::cli::run());
}
