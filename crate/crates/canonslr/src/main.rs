fn main() {
    std::process::exit(canonslr::cli::run());
}
