fn main() {
    std::process::exit(grannite_core::cli::run());
}
