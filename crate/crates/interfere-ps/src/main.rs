fn main() {
    std::process::exit(interfere_ps::cli::run());
}
