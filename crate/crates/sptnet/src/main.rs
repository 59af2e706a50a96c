fn main() {
    std::process::exit(sptnet::cli::run());
}
